//! Monte Carlo of the Geiger-mode pixel array and of a single-APD reference.
//!
//! The array is a `rows x cols` grid of pixels. Photons land on uniformly
//! random pixels and fire with probability `eta` when the pixel has recovered
//! from its last avalanche. Dark avalanches are a homogeneous Poisson process
//! over the whole device. Optical cross-talk fires a 4-connected neighbor at
//! the same timestamp; how many cross-talk avalanches a burst produces is set
//! by [`CrosstalkMode`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::source::{poisson_process, PhotonArrivals};
use crate::stats::DetectionDistribution;
use crate::{Error, Result};

/// Largest photon or pixel count accepted by [`occupancy_distribution`].
pub const MAX_OCCUPANCY_SIZE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Photon,
    Dark,
    Crosstalk,
}

impl Cause {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cause::Photon => "photon",
            Cause::Dark => "dark",
            Cause::Crosstalk => "crosstalk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvalancheEvent {
    pub time: f64,
    pub pixel: u32,
    pub cause: Cause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrosstalkMode {
    /// Avalanches closer than the coincidence window form a group; a group of
    /// `n` gains one more cross-talk avalanche with probability
    /// `n p / (1 + n p)`, repeatedly. Its multiplicity statistics are exactly
    /// the first-order redistribution in [`crate::stats::crosstalk_redistribute`].
    Group,
    /// Each primary avalanche triggers at most one neighbor, with probability `p`.
    Single,
    /// Like `Single`, but cross-talk avalanches trigger further ones.
    Cascade,
}

/// One anchor of the temperature to dark-rate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkAnchor {
    pub temperature_c: f64,
    pub rate_hz: f64,
}

pub fn default_dark_table() -> Vec<DarkAnchor> {
    vec![
        DarkAnchor {
            temperature_c: -14.0,
            rate_hz: 30e3,
        },
        DarkAnchor {
            temperature_c: -7.0,
            rate_hz: 50e3,
        },
    ]
}

/// Linear interpolation in a table sorted by temperature, clamped at both ends.
pub fn dark_rate_at(table: &[DarkAnchor], temperature_c: f64) -> Option<f64> {
    let first = table.first()?;
    let last = table.last()?;
    if temperature_c <= first.temperature_c {
        return Some(first.rate_hz);
    }
    if temperature_c >= last.temperature_c {
        return Some(last.rate_hz);
    }
    table.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        (temperature_c >= a.temperature_c && temperature_c <= b.temperature_c).then(|| {
            let f = (temperature_c - a.temperature_c) / (b.temperature_c - a.temperature_c);
            a.rate_hz + f * (b.rate_hz - a.rate_hz)
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SipmConfig {
    pub n_pixels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Metadata; `eta` already includes it.
    pub fill_factor: f64,
    /// Per-photon detection probability.
    pub eta: f64,
    pub p_ct: f64,
    pub crosstalk_mode: CrosstalkMode,
    /// Avalanches closer than this share a cross-talk group, s.
    pub coincidence_window: f64,
    /// Whole-device dark count rate, Hz. Ignored when `temperature_c` is set.
    pub dark_rate_total: f64,
    /// Per-pixel dead time after an avalanche, s.
    pub recovery_time: f64,
    pub v_bias: f64,
    pub v_bd: f64,
    pub temperature_c: Option<f64>,
    pub dark_table: Vec<DarkAnchor>,
}

impl Default for SipmConfig {
    fn default() -> Self {
        Self {
            n_pixels: 132,
            rows: 12,
            cols: 11,
            fill_factor: 0.31,
            eta: 0.083,
            p_ct: 0.097,
            crosstalk_mode: CrosstalkMode::Group,
            coincidence_window: 0.5e-9,
            dark_rate_total: 50e3,
            recovery_time: 50e-9,
            v_bias: 32.0,
            v_bd: 28.0,
            temperature_c: None,
            dark_table: default_dark_table(),
        }
    }
}

impl SipmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pixels == 0 || self.n_pixels != self.rows * self.cols {
            return Err(Error::config(
                "device.n_pixels, device.rows, device.cols",
                format!(
                    "n_pixels = {} must equal rows x cols = {} x {}",
                    self.n_pixels, self.rows, self.cols
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(
                "device.eta",
                format!("{} not in [0, 1]", self.eta),
            ));
        }
        if !(0.0..1.0).contains(&self.p_ct) {
            return Err(Error::config(
                "device.p_ct",
                format!("{} not in [0, 1)", self.p_ct),
            ));
        }
        if !(self.dark_rate_total >= 0.0) || !self.dark_rate_total.is_finite() {
            return Err(Error::config("device.dark_rate_total", "must be >= 0"));
        }
        if !(self.recovery_time >= 0.0) {
            return Err(Error::config("device.recovery_time", "must be >= 0"));
        }
        if !(self.coincidence_window >= 0.0) {
            return Err(Error::config("device.coincidence_window", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fill_factor) {
            return Err(Error::config("device.fill_factor", "must be in [0, 1]"));
        }
        if self.temperature_c.is_some() && self.dark_table.is_empty() {
            return Err(Error::config(
                "device.dark_table",
                "temperature set but table is empty",
            ));
        }
        if self
            .dark_table
            .windows(2)
            .any(|w| w[1].temperature_c <= w[0].temperature_c || w[1].rate_hz < w[0].rate_hz)
        {
            return Err(Error::config(
                "device.dark_table",
                "anchors must be sorted by temperature with nondecreasing rate",
            ));
        }
        Ok(())
    }

    /// Dark rate after resolving the temperature table.
    pub fn effective_dark_rate(&self) -> f64 {
        self.temperature_c
            .and_then(|t| dark_rate_at(&self.dark_table, t))
            .unwrap_or(self.dark_rate_total)
    }

    pub fn dark_rate_per_pixel(&self) -> f64 {
        self.effective_dark_rate() / self.n_pixels as f64
    }

    /// 4-neighborhood of `pixel` on the non-periodic grid.
    pub fn neighbors(&self, pixel: usize) -> Vec<usize> {
        let (r, c) = (pixel / self.cols, pixel % self.cols);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(pixel - self.cols);
        }
        if r + 1 < self.rows {
            out.push(pixel + self.cols);
        }
        if c > 0 {
            out.push(pixel - 1);
        }
        if c + 1 < self.cols {
            out.push(pixel + 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApdConfig {
    pub eta: f64,
    pub dead_time: f64,
    pub dark_rate: f64,
}

impl Default for ApdConfig {
    fn default() -> Self {
        Self {
            eta: 0.083,
            dead_time: 50e-9,
            dark_rate: 100.0,
        }
    }
}

impl ApdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("apd.eta", "must be in [0, 1]"));
        }
        if !(self.dead_time >= 0.0) {
            return Err(Error::config("apd.dead_time", "must be >= 0"));
        }
        if !(self.dark_rate >= 0.0) {
            return Err(Error::config("apd.dark_rate", "must be >= 0"));
        }
        Ok(())
    }
}

struct PixelArray<'a> {
    recovery_time: f64,
    neighbors: &'a [Vec<u32>],
    last_fire: Vec<f64>,
}

impl PixelArray<'_> {
    fn is_live(&self, pixel: usize, t: f64) -> bool {
        t - self.last_fire[pixel] >= self.recovery_time
    }

    fn fire(&mut self, pixel: usize, t: f64) {
        self.last_fire[pixel] = t;
    }
}

/// A validated device with its neighbor table, reusable across runs.
#[derive(Debug, Clone)]
pub struct SipmDevice {
    cfg: SipmConfig,
    neighbors: Vec<Vec<u32>>,
}

impl SipmDevice {
    pub fn new(cfg: &SipmConfig) -> Result<Self> {
        cfg.validate()?;
        let neighbors = (0..cfg.n_pixels)
            .map(|p| cfg.neighbors(p).into_iter().map(|q| q as u32).collect())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            neighbors,
        })
    }

    pub fn config(&self) -> &SipmConfig {
        &self.cfg
    }

    /// Run the pixel-array Monte Carlo over `arrivals`.
    ///
    /// Dark avalanches are generated over `[0, arrivals.duration()]`.
    pub fn simulate(&self, arrivals: &PhotonArrivals, seed: u64) -> Vec<AvalancheEvent> {
        let cfg = &self.cfg;
        debug_assert!(arrivals.is_sorted());
        let mut rng = rng_from_seed(seed);
        let dark = poisson_process(cfg.effective_dark_rate(), arrivals.duration(), &mut rng);
        let mut array = PixelArray {
            recovery_time: cfg.recovery_time,
            neighbors: &self.neighbors,
            last_fire: vec![f64::NEG_INFINITY; cfg.n_pixels],
        };
        let n_pixels = cfg.n_pixels;
        let mut events = Vec::with_capacity(arrivals.len() / 4 + dark.len() + 8);
        // current cross-talk group for `Group` mode: indices into `events`
        let mut group: Vec<usize> = Vec::new();
        let mut group_start = f64::NEG_INFINITY;

        let (mut i, mut j) = (0, 0);
        while i < arrivals.times.len() || j < dark.len() {
            let take_photon =
                j >= dark.len() || (i < arrivals.times.len() && arrivals.times[i] <= dark[j]);
            let (t, cause) = if take_photon {
                i += 1;
                (arrivals.times[i - 1], Cause::Photon)
            } else {
                j += 1;
                (dark[j - 1], Cause::Dark)
            };
            if cfg.crosstalk_mode == CrosstalkMode::Group
                && !group.is_empty()
                && t - group_start > cfg.coincidence_window
            {
                close_group(&mut group, &mut events, &mut array, &mut rng, cfg.p_ct);
            }
            let pixel = rng.random_range(0..n_pixels);
            let fires = match cause {
                Cause::Photon => rng.random::<f64>() < cfg.eta,
                _ => true,
            };
            if !fires || !array.is_live(pixel, t) {
                continue;
            }

            array.fire(pixel, t);
            events.push(AvalancheEvent {
                time: t,
                pixel: pixel as u32,
                cause,
            });

            match cfg.crosstalk_mode {
                CrosstalkMode::Group => {
                    if group.is_empty() {
                        group_start = t;
                    }
                    group.push(events.len() - 1);
                }
                CrosstalkMode::Single => {
                    let idx = events.len() - 1;
                    spread(idx, &mut events, &mut array, &mut rng, cfg.p_ct, false);
                }
                CrosstalkMode::Cascade => {
                    let idx = events.len() - 1;
                    spread(idx, &mut events, &mut array, &mut rng, cfg.p_ct, true);
                }
            }
        }
        if !group.is_empty() {
            close_group(&mut group, &mut events, &mut array, &mut rng, cfg.p_ct);
        }
        // cross-talk avalanches carry their parent's timestamp
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        events
    }
}

/// One-shot form of [`SipmDevice::simulate`].
pub fn simulate_sipm(
    arrivals: &PhotonArrivals,
    cfg: &SipmConfig,
    seed: u64,
) -> Result<Vec<AvalancheEvent>> {
    Ok(SipmDevice::new(cfg)?.simulate(arrivals, seed))
}

/// Pick a neighbor of the avalanche at `parent` and fire it if it is live.
fn try_crosstalk(
    parent: usize,
    events: &mut Vec<AvalancheEvent>,
    array: &mut PixelArray<'_>,
    rng: &mut crate::rng::SimRng,
) -> Option<usize> {
    let AvalancheEvent { time, pixel, .. } = events[parent];
    let neigh = &array.neighbors[pixel as usize];
    if neigh.is_empty() {
        return None;
    }
    let target = neigh[rng.random_range(0..neigh.len())] as usize;
    if !array.is_live(target, time) {
        return None;
    }
    array.fire(target, time);
    events.push(AvalancheEvent {
        time,
        pixel: target as u32,
        cause: Cause::Crosstalk,
    });
    Some(events.len() - 1)
}

fn spread(
    first: usize,
    events: &mut Vec<AvalancheEvent>,
    array: &mut PixelArray<'_>,
    rng: &mut crate::rng::SimRng,
    p_ct: f64,
    cascade: bool,
) {
    let mut pending = vec![first];
    while let Some(parent) = pending.pop() {
        if rng.random::<f64>() >= p_ct {
            continue;
        }
        if let Some(child) = try_crosstalk(parent, events, array, rng) {
            if cascade {
                pending.push(child);
            }
        }
    }
}

fn close_group(
    group: &mut Vec<usize>,
    events: &mut Vec<AvalancheEvent>,
    array: &mut PixelArray<'_>,
    rng: &mut crate::rng::SimRng,
    p_ct: f64,
) {
    let time = events[group[0]].time;
    let mut members: Vec<u32> = group.iter().map(|&i| events[i].pixel).collect();
    let mut candidates: Vec<u32> = Vec::new();
    if p_ct > 0.0 {
        grow_group(
            &mut members,
            &mut candidates,
            time,
            events,
            array,
            rng,
            p_ct,
        );
    }
    group.clear();
}

fn grow_group(
    members: &mut Vec<u32>,
    candidates: &mut Vec<u32>,
    time: f64,
    events: &mut Vec<AvalancheEvent>,
    array: &mut PixelArray<'_>,
    rng: &mut crate::rng::SimRng,
    p_ct: f64,
) {
    loop {
        let n = members.len() as f64;
        if rng.random::<f64>() >= n * p_ct / (1.0 + n * p_ct) {
            break;
        }
        // every (member, free neighbor) edge is equally likely
        candidates.clear();
        for &m in members.iter() {
            for &q in &array.neighbors[m as usize] {
                if !members.contains(&q) && array.is_live(q as usize, time) {
                    candidates.push(q);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let target = candidates[rng.random_range(0..candidates.len())];
        array.fire(target as usize, time);
        events.push(AvalancheEvent {
            time,
            pixel: target,
            cause: Cause::Crosstalk,
        });
        members.push(target);
    }
}

/// Single non-paralyzable detector: only registered detections start a dead period.
pub fn simulate_apd(arrivals: &PhotonArrivals, cfg: &ApdConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    debug_assert!(arrivals.is_sorted());
    let mut rng = rng_from_seed(seed);
    let dark = poisson_process(cfg.dark_rate, arrivals.duration(), &mut rng);
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    let (mut i, mut j) = (0, 0);
    while i < arrivals.times.len() || j < dark.len() {
        let take_photon =
            j >= dark.len() || (i < arrivals.times.len() && arrivals.times[i] <= dark[j]);
        let (t, fires) = if take_photon {
            i += 1;
            (arrivals.times[i - 1], rng.random::<f64>() < cfg.eta)
        } else {
            j += 1;
            (dark[j - 1], true)
        };
        if fires && t - last >= cfg.dead_time {
            out.push(t);
            last = t;
        }
    }
    Ok(out)
}

/// Distribution of distinct fired pixels when `k_photons` land uniformly on
/// `n_pixels` pixels and each is detected with probability `eta`.
pub fn occupancy_distribution(
    k_photons: usize,
    n_pixels: usize,
    eta: f64,
) -> Result<DetectionDistribution> {
    if n_pixels == 0 {
        return Err(Error::domain("occupancy needs at least one pixel"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("eta = {eta} not in [0, 1]")));
    }
    for (what, v) in [("photon count", k_photons), ("pixel count", n_pixels)] {
        if v > MAX_OCCUPANCY_SIZE {
            return Err(Error::Size {
                what,
                required: v,
                limit: MAX_OCCUPANCY_SIZE,
            });
        }
    }
    let max_occ = k_photons.min(n_pixels);
    let mut p = vec![0.0; max_occ + 1];
    p[0] = 1.0;
    let n = n_pixels as f64;
    for step in 0..k_photons {
        let top = step.min(max_occ);
        // descending so each photon moves probability up at most one level
        for j in (0..=top).rev() {
            let up = eta * (n - j as f64) / n;
            let moved = p[j] * up;
            p[j] -= moved;
            if j < max_occ {
                p[j + 1] += moved;
            }
        }
    }
    for v in &mut p {
        *v = v.clamp(0.0, 1.0);
    }
    DetectionDistribution::new(p)
}
