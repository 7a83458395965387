//! Analog front end: pulse synthesis, high-pass filter, noise and amplifier.
//!
//! Every stage exists both as a batch function on a [`Waveform`] and as a
//! stateful block that processes consecutive chunks. The batch functions are
//! thin wrappers around the blocks, so chunked processing of a long trace is
//! bit-identical to processing it in one piece.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::device::AvalancheEvent;
use crate::rng::{rng_from_seed, SimRng};
use crate::{Error, Result};

/// Largest waveform held in memory at once, in samples.
pub const MAX_SAMPLES: usize = 1 << 26;

/// Tolerance, in samples, for treating an event time as lying on the grid.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub tau_rise: f64,
    pub tau_fall: f64,
    /// Target post-filter single-cell peak, mV.
    pub peak_mv: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            tau_rise: 150e-12,
            tau_fall: 15e-9,
            peak_mv: 110.0,
        }
    }
}

/// Single-cell pulse `scale * (exp(-t/tau_fall) - exp(-t/tau_rise))` for `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseTemplate {
    pub tau_rise: f64,
    pub tau_fall: f64,
    pub scale: f64,
}

impl PulseTemplate {
    pub fn new(tau_rise: f64, tau_fall: f64, scale: f64) -> Result<Self> {
        if !(tau_rise > 0.0 && tau_fall > tau_rise && tau_fall.is_finite()) {
            return Err(Error::config(
                "template.tau_rise, template.tau_fall",
                format!("need 0 < tau_rise < tau_fall, got {tau_rise} and {tau_fall}"),
            ));
        }
        if !scale.is_finite() {
            return Err(Error::domain("template scale must be finite"));
        }
        Ok(Self {
            tau_rise,
            tau_fall,
            scale,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.scale * ((-t / self.tau_fall).exp() - (-t / self.tau_rise).exp())
        }
    }

    /// Template whose filtered response to one on-grid event peaks at `cfg.peak_mv`.
    pub fn calibrated(cfg: &TemplateConfig, sample_period: f64, hp_cutoff: f64) -> Result<Self> {
        if !(cfg.peak_mv > 0.0) {
            return Err(Error::config("template.peak_mv", "must be > 0"));
        }
        let unit = Self::new(cfg.tau_rise, cfg.tau_fall, 1.0)?;
        let peak = unit.filtered_peak(sample_period, hp_cutoff)?;
        Self::new(cfg.tau_rise, cfg.tau_fall, cfg.peak_mv / peak)
    }

    /// Recalibrate the scale of an existing template.
    pub fn calibrate(&self, peak_mv: f64, sample_period: f64, hp_cutoff: f64) -> Result<Self> {
        let cfg = TemplateConfig {
            tau_rise: self.tau_rise,
            tau_fall: self.tau_fall,
            peak_mv,
        };
        Self::calibrated(&cfg, sample_period, hp_cutoff)
    }

    /// Filtered single-event response starting at an on-grid event at `t = 0`.
    pub fn filtered_response(
        &self,
        sample_period: f64,
        hp_cutoff: f64,
        length: f64,
    ) -> Result<Waveform> {
        let ev = [AvalancheEvent {
            time: 0.0,
            pixel: 0,
            cause: crate::device::Cause::Photon,
        }];
        let w = synthesize(&ev, self, (0.0, length), sample_period)?;
        high_pass(&w, hp_cutoff)
    }

    /// Maximum of the filtered single-event response.
    pub fn filtered_peak(&self, sample_period: f64, hp_cutoff: f64) -> Result<f64> {
        let length = 20.0 * self.tau_rise + 20.0 / (2.0 * PI * hp_cutoff) + 10.0 * sample_period;
        let w = self.filtered_response(sample_period, hp_cutoff, length)?;
        Ok(w.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Uniformly sampled voltage trace in mV; sample `i` is at `t0 + i * sample_period`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_period: f64,
    pub t0: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_period: f64, t0: f64) -> Result<Self> {
        if !(sample_period > 0.0) || !sample_period.is_finite() {
            return Err(Error::domain(format!(
                "sample period {sample_period} must be > 0"
            )));
        }
        if !t0.is_finite() || samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("waveform contains non-finite values"));
        }
        Ok(Self {
            samples,
            sample_period,
            t0,
        })
    }

    pub fn zeros(len: usize, sample_period: f64, t0: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_period, t0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.sample_period
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.sample_period
    }

    pub fn max(&self) -> f64 {
        self.samples
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first sample at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let x = (t - self.t0) / self.sample_period;
        if x <= 0.0 {
            0
        } else {
            ((x - GRID_EPS).ceil() as usize).min(self.len())
        }
    }
}

/// Number of samples covering `[t_start, t_end)`.
pub fn sample_count(window: (f64, f64), sample_period: f64) -> Result<usize> {
    let (a, b) = window;
    if !(a.is_finite() && b.is_finite() && b >= a) {
        return Err(Error::domain(format!("invalid window ({a}, {b})")));
    }
    if !(sample_period > 0.0) {
        return Err(Error::domain("sample period must be > 0"));
    }
    let n = ((b - a) / sample_period - GRID_EPS).ceil().max(0.0);
    if n > MAX_SAMPLES as f64 {
        return Err(Error::Size {
            what: "waveform samples",
            required: n as usize,
            limit: MAX_SAMPLES,
        });
    }
    Ok(n as usize)
}

/// Streaming pulse synthesizer.
///
/// The template is a difference of two exponentials, so the superposition of
/// all past events is carried by two decaying accumulators. Each event is
/// injected at the first sample at or after its time with the exact
/// fractional-offset weights.
#[derive(Debug, Clone)]
pub struct Synthesizer<'a> {
    events: &'a [AvalancheEvent],
    tpl: PulseTemplate,
    t0: f64,
    dt: f64,
    next_event: usize,
    next_sample: usize,
    fall: f64,
    rise: f64,
    decay_fall: f64,
    decay_rise: f64,
}

impl<'a> Synthesizer<'a> {
    pub fn new(
        events: &'a [AvalancheEvent],
        tpl: PulseTemplate,
        t0: f64,
        sample_period: f64,
    ) -> Self {
        debug_assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
        Self {
            events,
            tpl,
            t0,
            dt: sample_period,
            next_event: 0,
            next_sample: 0,
            fall: 0.0,
            rise: 0.0,
            decay_fall: (-sample_period / tpl.tau_fall).exp(),
            decay_rise: (-sample_period / tpl.tau_rise).exp(),
        }
    }

    /// Write the next `out.len()` samples.
    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            let i = self.next_sample;
            self.fall *= self.decay_fall;
            self.rise *= self.decay_rise;
            let t_i = self.t0 + i as f64 * self.dt;
            // events inject at the first sample at or after their time
            while let Some(e) = self.events.get(self.next_event) {
                let x = (e.time - self.t0) / self.dt;
                if x - GRID_EPS > i as f64 {
                    break;
                }
                let offset = (t_i - e.time).max(0.0);
                // group identical timestamps so n coincident events inject n times the weight
                let mut mult = 1usize;
                while self
                    .events
                    .get(self.next_event + mult)
                    .is_some_and(|f| f.time == e.time)
                {
                    mult += 1;
                }
                let m = mult as f64 * self.tpl.scale;
                self.fall += m * (-offset / self.tpl.tau_fall).exp();
                self.rise += m * (-offset / self.tpl.tau_rise).exp();
                self.next_event += mult;
            }
            *v = self.fall - self.rise;
            self.next_sample += 1;
        }
    }
}

/// Superpose the template for every event on the grid of `window`.
pub fn synthesize(
    events: &[AvalancheEvent],
    tpl: &PulseTemplate,
    window: (f64, f64),
    sample_period: f64,
) -> Result<Waveform> {
    if events.windows(2).any(|w| w[0].time > w[1].time) {
        return Err(Error::domain("events must be sorted by time"));
    }
    let n = sample_count(window, sample_period)?;
    let mut samples = vec![0.0; n];
    Synthesizer::new(events, *tpl, window.0, sample_period).fill(&mut samples);
    Waveform::new(samples, sample_period, window.0)
}

/// First-order high-pass `y[i] = a * (y[i-1] + x[i] - x[i-1])` with zero initial state.
#[derive(Debug, Clone)]
pub struct HighPass {
    alpha: f64,
    prev_x: f64,
    prev_y: f64,
}

impl HighPass {
    pub fn new(cutoff: f64, sample_period: f64) -> Result<Self> {
        let nyquist = 0.5 / sample_period;
        if !(cutoff > 0.0) || cutoff >= nyquist {
            return Err(Error::domain(format!(
                "high-pass cutoff {cutoff} Hz must be in (0, {nyquist}) Hz"
            )));
        }
        Ok(Self {
            alpha: 1.0 / (1.0 + 2.0 * PI * cutoff * sample_period),
            prev_x: 0.0,
            prev_y: 0.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn process(&mut self, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            let x = *v;
            let y = self.alpha * (self.prev_y + x - self.prev_x);
            self.prev_x = x;
            self.prev_y = y;
            *v = y;
        }
    }
}

pub fn high_pass(w: &Waveform, cutoff: f64) -> Result<Waveform> {
    let mut hp = HighPass::new(cutoff, w.sample_period)?;
    let mut out = w.clone();
    hp.process(&mut out.samples);
    Ok(out)
}

/// Additive white Gaussian noise.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    normal: Option<Normal<f64>>,
    rng: SimRng,
}

impl NoiseSource {
    pub fn new(rms: f64, seed: u64) -> Result<Self> {
        if !(rms >= 0.0) || !rms.is_finite() {
            return Err(Error::config(
                "chain.noise_rms",
                format!("{rms} must be >= 0"),
            ));
        }
        let normal = (rms > 0.0).then(|| Normal::new(0.0, rms).expect("rms > 0"));
        Ok(Self {
            normal,
            rng: rng_from_seed(seed),
        })
    }

    pub fn process(&mut self, buf: &mut [f64]) {
        if let Some(normal) = &self.normal {
            for v in buf.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
    }
}

pub fn add_noise(w: &Waveform, rms: f64, seed: u64) -> Result<Waveform> {
    let mut out = w.clone();
    NoiseSource::new(rms, seed)?.process(&mut out.samples);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpMode {
    Linear,
    /// `v -> sat_level * tanh(v / sat_level)`
    Soft,
}

/// Where the amplifier sits relative to the high-pass filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpPosition {
    /// Sees the raw pulses including the slow tails that pile up at high rates.
    PreFilter,
    PostFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// s
    pub sample_period: f64,
    /// Hz
    pub hp_cutoff: f64,
    /// mV
    pub noise_rms: f64,
    pub amp_mode: AmpMode,
    pub amp_position: AmpPosition,
    /// mV
    pub sat_level: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            sample_period: 50e-12,
            hp_cutoff: 500e6,
            noise_rms: 5.0,
            amp_mode: AmpMode::Linear,
            amp_position: AmpPosition::PreFilter,
            sat_level: 1000.0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period > 0.0) || !self.sample_period.is_finite() {
            return Err(Error::config("chain.sample_period", "must be > 0"));
        }
        if !(self.hp_cutoff > 0.0) {
            return Err(Error::config("chain.hp_cutoff", "must be > 0"));
        }
        if self.hp_cutoff >= 0.5 / self.sample_period {
            return Err(Error::config(
                "chain.hp_cutoff",
                "must be below the Nyquist frequency",
            ));
        }
        if !(self.noise_rms >= 0.0) || !self.noise_rms.is_finite() {
            return Err(Error::config("chain.noise_rms", "must be >= 0"));
        }
        if !(self.sat_level > 0.0) {
            return Err(Error::config("chain.sat_level", "must be > 0"));
        }
        Ok(())
    }

    pub fn amplifier(&self) -> Amplifier {
        Amplifier {
            mode: self.amp_mode,
            sat_level: self.sat_level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplifier {
    pub mode: AmpMode,
    pub sat_level: f64,
}

impl Amplifier {
    pub fn apply(&self, v: f64) -> f64 {
        match self.mode {
            AmpMode::Linear => v,
            AmpMode::Soft => self.sat_level * (v / self.sat_level).tanh(),
        }
    }

    pub fn process(&self, buf: &mut [f64]) {
        if self.mode != AmpMode::Linear {
            buf.iter_mut().for_each(|v| *v = self.apply(*v));
        }
    }
}

pub fn amplify(w: &Waveform, cfg: &ChainConfig) -> Waveform {
    let mut out = w.clone();
    cfg.amplifier().process(&mut out.samples);
    out
}

/// The full analog chain as one streaming block: synthesis, high-pass filter
/// and noise, with the amplifier before or after the filter.
#[derive(Debug, Clone)]
pub struct AnalogChain<'a> {
    synth: Synthesizer<'a>,
    hp: HighPass,
    noise: NoiseSource,
    amp: Amplifier,
    amp_position: AmpPosition,
    produced: usize,
    total: usize,
}

impl<'a> AnalogChain<'a> {
    pub fn new(
        events: &'a [AvalancheEvent],
        tpl: PulseTemplate,
        cfg: &ChainConfig,
        window: (f64, f64),
        noise_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if events.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(Error::domain("events must be sorted by time"));
        }
        let (a, b) = window;
        if !(a.is_finite() && b.is_finite() && b >= a) {
            return Err(Error::domain(format!("invalid window ({a}, {b})")));
        }
        let total = ((b - a) / cfg.sample_period - GRID_EPS).ceil().max(0.0) as usize;
        Ok(Self {
            synth: Synthesizer::new(events, tpl, a, cfg.sample_period),
            hp: HighPass::new(cfg.hp_cutoff, cfg.sample_period)?,
            noise: NoiseSource::new(cfg.noise_rms, noise_seed)?,
            amp: cfg.amplifier(),
            amp_position: cfg.amp_position,
            produced: 0,
            total,
        })
    }

    pub fn total_samples(&self) -> usize {
        self.total
    }

    pub fn produced(&self) -> usize {
        self.produced
    }

    /// Fill up to `buf.len()` samples; returns how many were written.
    pub fn next_chunk(&mut self, buf: &mut [f64]) -> usize {
        let n = buf.len().min(self.total - self.produced);
        let chunk = &mut buf[..n];
        self.synth.fill(chunk);
        if self.amp_position == AmpPosition::PreFilter {
            self.amp.process(chunk);
        }
        self.hp.process(chunk);
        self.noise.process(chunk);
        if self.amp_position == AmpPosition::PostFilter {
            self.amp.process(chunk);
        }
        self.produced += n;
        n
    }
}

/// Batch version of [`AnalogChain`].
pub fn render(
    events: &[AvalancheEvent],
    tpl: &PulseTemplate,
    cfg: &ChainConfig,
    window: (f64, f64),
    noise_seed: u64,
) -> Result<Waveform> {
    let n = sample_count(window, cfg.sample_period)?;
    let mut chain = AnalogChain::new(events, *tpl, cfg, window, noise_seed)?;
    let mut samples = vec![0.0; n];
    chain.next_chunk(&mut samples);
    Waveform::new(samples, cfg.sample_period, window.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::Cause;

    fn ev(time: f64) -> AvalancheEvent {
        AvalancheEvent {
            time,
            pixel: 0,
            cause: Cause::Photon,
        }
    }

    fn default_tpl() -> PulseTemplate {
        let c = ChainConfig::default();
        PulseTemplate::calibrated(&TemplateConfig::default(), c.sample_period, c.hp_cutoff).unwrap()
    }

    /// Direct evaluation of the template on the grid.
    fn direct(
        events: &[AvalancheEvent],
        tpl: &PulseTemplate,
        t0: f64,
        n: usize,
        dt: f64,
    ) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = t0 + i as f64 * dt;
                events.iter().map(|e| tpl.eval(t - e.time)).sum()
            })
            .collect()
    }

    fn fwhm(w: &Waveform) -> f64 {
        let (imax, peak) =
            w.samples
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |a, (i, v)| if v > a.1 { (i, v) } else { a },
                );
        let half = peak / 2.0;
        let mut lo = imax;
        while lo > 0 && w.samples[lo - 1] >= half {
            lo -= 1;
        }
        let mut hi = imax;
        while hi + 1 < w.len() && w.samples[hi + 1] >= half {
            hi += 1;
        }
        // linear interpolation of both half-crossings
        let left = if lo > 0 {
            let (a, b) = (w.samples[lo - 1], w.samples[lo]);
            (lo - 1) as f64 + (half - a) / (b - a)
        } else {
            0.0
        };
        let right = {
            let (a, b) = (w.samples[hi], w.samples[hi + 1]);
            hi as f64 + (a - half) / (a - b)
        };
        (right - left) * w.sample_period
    }

    #[test]
    fn no_events_is_zero() {
        let w = synthesize(&[], &default_tpl(), (0.0, 10e-9), 50e-12).unwrap();
        assert_eq!(w.len(), 200);
        assert!(w.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recursion_matches_direct_sum() {
        let tpl = default_tpl();
        let events: Vec<_> = [-3.1e-9, 0.0, 1.234e-9, 1.234e-9, 4.56789e-9, 9.99e-9, 12e-9]
            .into_iter()
            .map(ev)
            .collect();
        let w = synthesize(&events, &tpl, (0.0, 12e-9), 50e-12).unwrap();
        let d = direct(&events, &tpl, 0.0, w.len(), 50e-12);
        for (a, b) in w.samples.iter().zip(&d) {
            assert!((a - b).abs() < 1e-9 * tpl.scale, "{a} vs {b}");
        }
    }

    #[test]
    fn coincident_events_scale_exactly() {
        let tpl = default_tpl();
        let one = synthesize(&[ev(1e-9)], &tpl, (0.0, 5e-9), 50e-12).unwrap();
        let two = synthesize(&[ev(1e-9), ev(1e-9)], &tpl, (0.0, 5e-9), 50e-12).unwrap();
        for (a, b) in one.samples.iter().zip(&two.samples) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn calibrated_peak_and_width() {
        let c = ChainConfig::default();
        let tpl = default_tpl();
        let resp = tpl
            .filtered_response(c.sample_period, c.hp_cutoff, 20e-9)
            .unwrap();
        let peak = resp.max();
        assert!((peak - 110.0).abs() < 1.1, "{peak}");
        let width = fwhm(&resp);
        assert!((width - 0.5e-9).abs() <= 0.1e-9, "fwhm {width}");
        // undershoot appears within about 1 ns of the peak
        let imax = resp.samples.iter().position(|v| *v == peak).unwrap();
        let first_neg = resp.samples[imax..].iter().position(|v| *v < 0.0).unwrap();
        assert!(first_neg as f64 * c.sample_period < 1.5e-9);
        assert!(resp.samples.iter().copied().fold(0.0, f64::min) < 0.0);
    }

    #[test]
    fn calibration_idempotent() {
        let c = ChainConfig::default();
        let tpl = default_tpl();
        let again = tpl.calibrate(110.0, c.sample_period, c.hp_cutoff).unwrap();
        assert!((again.scale / tpl.scale - 1.0).abs() < 1e-6);
    }

    #[test]
    fn high_pass_rejects_dc() {
        // the decay per sample is alpha, slightly slower than exp(-dt / tau)
        let dt = 50e-12;
        let fc = 500e6;
        let tau = 1.0 / (2.0 * PI * fc);
        let n = (15.0 * tau / dt).ceil() as usize + 1;
        let w = Waveform::new(vec![3.0; n], dt, 0.0).unwrap();
        let y = high_pass(&w, fc).unwrap();
        assert!(y.samples.last().unwrap().abs() < 1e-6 * 3.0);
    }

    #[test]
    fn high_pass_sine_gain() {
        // fine sampling so the discrete filter approaches the RC response
        let fc = 500e6;
        let f = 10.0 * fc;
        let dt = 1e-14;
        let n = (40.0 / f / dt) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * f * i as f64 * dt).sin())
            .collect();
        let y = high_pass(&Waveform::new(x, dt, 0.0).unwrap(), fc).unwrap();
        let tail = &y.samples[n / 2..];
        let amp = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let analytic = f / (f * f + fc * fc).sqrt();
        assert!(amp >= 0.995, "{amp}");
        assert!((amp - analytic).abs() < 2e-3);
    }

    #[test]
    fn high_pass_discrete_transfer() {
        // |H(z)| of the recursion at z = exp(i w dt)
        let (fc, dt, f) = (500e6, 50e-12, 2e9);
        let mut hp = HighPass::new(fc, dt).unwrap();
        let a = hp.alpha();
        let w = 2.0 * PI * f * dt;
        let num = ((1.0 - w.cos()).powi(2) + w.sin().powi(2)).sqrt();
        let den = ((1.0 - a * w.cos()).powi(2) + (a * w.sin()).powi(2)).sqrt();
        let expected = a * num / den;
        let n = 20_000;
        let mut x: Vec<f64> = (0..n).map(|i| (w * i as f64).sin()).collect();
        hp.process(&mut x);
        // 10 samples per period, so the tail holds whole periods
        let tail = &x[n / 2..];
        let amp = (2.0 * tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
        assert!((amp - expected).abs() < 1e-4, "{amp} vs {expected}");
    }

    #[test]
    fn high_pass_nyquist_error() {
        let w = Waveform::zeros(10, 50e-12, 0.0).unwrap();
        assert!(matches!(high_pass(&w, 10e9), Err(Error::Domain(_))));
        assert!(high_pass(&w, 9.9e9).is_ok());
    }

    #[test]
    fn noise_rms_and_determinism() {
        let w = Waveform::zeros(1_000_000, 50e-12, 0.0).unwrap();
        let n = add_noise(&w, 15.0, 4).unwrap();
        let rms = (n.samples.iter().map(|v| v * v).sum::<f64>() / n.len() as f64).sqrt();
        assert!((rms - 15.0).abs() < 0.1, "{rms}");
        assert_eq!(n, add_noise(&w, 15.0, 4).unwrap());
        assert_eq!(add_noise(&n, 0.0, 9).unwrap(), n);
    }

    #[test]
    fn amplifier_modes() {
        let w = Waveform::new(vec![-5.0, 0.0, 1.0, 1500.0], 1e-9, 0.0).unwrap();
        let lin = ChainConfig::default();
        assert_eq!(amplify(&w, &lin), w);
        let soft = ChainConfig {
            amp_mode: AmpMode::Soft,
            sat_level: 150.0,
            ..lin.clone()
        };
        let out = amplify(&w, &soft);
        assert!((out.samples[2] - 1.0).abs() < 0.01);
        assert!((out.samples[0] + 5.0).abs() < 0.05);
        assert!(out.samples[3] <= 150.0);
    }

    #[test]
    fn window_size_limit() {
        let err = synthesize(&[], &default_tpl(), (0.0, 1.0), 50e-12).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Size {
                    required: 20_000_000_000,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn chunked_chain_is_bit_identical() {
        let tpl = default_tpl();
        let events: Vec<_> = (0..300)
            .map(|i| ev(i as f64 * 0.37e-9 + 0.011e-9))
            .collect();
        let window = (-1e-9, 120e-9);
        for amp_position in [AmpPosition::PreFilter, AmpPosition::PostFilter] {
            let cfg = ChainConfig {
                noise_rms: 7.0,
                amp_mode: AmpMode::Soft,
                amp_position,
                ..ChainConfig::default()
            };
            let batch = render(&events, &tpl, &cfg, window, 42).unwrap();
            let mut chain = AnalogChain::new(&events, tpl, &cfg, window, 42).unwrap();
            let mut out = Vec::new();
            let mut buf = vec![0.0; 77];
            loop {
                let n = chain.next_chunk(&mut buf);
                if n == 0 {
                    break;
                }
                out.extend_from_slice(&buf[..n]);
            }
            assert_eq!(out, batch.samples);
        }
    }

    #[test]
    fn saturating_front_end_suppresses_piled_up_pulses() {
        // single cells every 2.3 ns ride on a 1.5 V pile-up level
        let tpl = default_tpl();
        let events: Vec<_> = (0..2000).map(|i| ev(i as f64 / 430e6)).collect();
        let window = (0.0, 2000.0 / 430e6);
        let quiet = ChainConfig {
            noise_rms: 0.0,
            ..ChainConfig::default()
        };
        let soft = ChainConfig {
            amp_mode: AmpMode::Soft,
            ..quiet.clone()
        };
        let lin = render(&events, &tpl, &quiet, window, 0).unwrap();
        let sat = render(&events, &tpl, &soft, window, 0).unwrap();
        let tail = |w: &Waveform| {
            w.samples[w.len() / 2..]
                .iter()
                .copied()
                .fold(f64::MIN, f64::max)
        };
        assert!(tail(&lin) > 80.0);
        assert!(tail(&sat) < 40.0, "{}", tail(&sat));
    }
}
