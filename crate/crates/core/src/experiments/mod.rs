//! Scripted end-to-end runs of the characterization measurements.
//!
//! Each experiment takes an [`ExperimentSpec`], returns an
//! [`ExperimentOutput`] (a results table, a model-comparison table and a
//! plot), and is fully determined by the spec: sweep points and trials run
//! in parallel with seeds derived from the master seed and their grid index,
//! and results are assembled in grid order.

pub mod cw;
pub mod multiphoton;
pub mod power_meter;
pub mod pulsed;
pub mod saturation;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analog::{AnalogChain, ChainConfig, PulseTemplate};
use crate::config::SimConfig;
use crate::device::AvalancheEvent;
use crate::discriminate::{DiscriminatorConfig, PeakFinder};
use crate::io::CsvTable;
use crate::plot::Plot;
use crate::rng::RNG_ALGORITHM;
use crate::{Error, Result};

/// Samples per chunk when streaming long waveforms.
pub const CHUNK_SAMPLES: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Multiphoton,
    Saturation,
    #[serde(rename = "pulsed_430")]
    Pulsed430,
    Cw,
    PowerMeter,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Multiphoton,
        ExperimentKind::Saturation,
        ExperimentKind::Pulsed430,
        ExperimentKind::Cw,
        ExperimentKind::PowerMeter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Multiphoton => "multiphoton",
            ExperimentKind::Saturation => "saturation",
            ExperimentKind::Pulsed430 => "pulsed_430",
            ExperimentKind::Cw => "cw",
            ExperimentKind::PowerMeter => "power_meter",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || (norm == "pulsed" && *k == ExperimentKind::Pulsed430))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.as_str()).collect();
                Error::domain(format!(
                    "unknown experiment `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Everything needed to run (and re-run) one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentKind,
    /// Triggers per sweep point (multiphoton).
    pub trials: u64,
    /// Shortest simulated time per sweep point, s.
    pub min_duration: f64,
    /// Longest simulated time per sweep point, s.
    pub max_duration: f64,
    /// Each sweep point runs until about this many counts are expected.
    pub target_counts: f64,
    /// Mean photons per pulse for saturating illumination.
    pub saturating_mu: f64,
    /// LED pulse width (saturation), s.
    pub led_width: f64,
    /// Discriminator hold-off used by the saturation run, s.
    pub holdoff: f64,
    /// Repeat the sweep with the saturating amplifier.
    pub soft_variant: bool,
    /// Sweep values: a0 (multiphoton), pulse rate in Hz (saturation), mu
    /// (pulsed_430), incident photon rate in Hz (cw), count rate in Hz (power_meter).
    pub sweep: Vec<f64>,
    /// Simulation parameters; `config.seed` is the master seed.
    pub config: SimConfig,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentKind, config: SimConfig) -> Self {
        let base = Self {
            name,
            trials: 1,
            min_duration: 1e-6,
            max_duration: 1e-3,
            target_counts: 2e4,
            saturating_mu: 200.0,
            led_width: 10e-9,
            holdoff: 15e-9,
            soft_variant: false,
            sweep: Vec::new(),
            config,
        };
        match name {
            ExperimentKind::Multiphoton => Self {
                trials: 1_000_000,
                sweep: vec![0.2, 1.0, 2.0],
                ..base
            },
            ExperimentKind::Saturation => Self {
                min_duration: 10e-6,
                max_duration: 2e-3,
                target_counts: 2000.0,
                sweep: vec![1e6, 2e6, 5e6, 10e6, 20e6, 30e6, 40e6],
                ..base
            },
            ExperimentKind::Pulsed430 => Self {
                min_duration: 10e-6,
                max_duration: 2e-3,
                target_counts: 5e4,
                soft_variant: true,
                sweep: vec![
                    0.0, 0.005, 0.01, 0.02, 0.04, 0.08, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0,
                    100.0, 200.0,
                ],
                ..base
            },
            ExperimentKind::Cw => Self {
                min_duration: 1e-6,
                max_duration: 5e-3,
                target_counts: 2e4,
                soft_variant: true,
                sweep: vec![
                    0.0, 1e6, 2e6, 5e6, 1e7, 2e7, 3e7, 1e8, 3e8, 1e9, 3e9, 1e10, 3e10, 1e11,
                ],
                ..base
            },
            ExperimentKind::PowerMeter => Self {
                sweep: vec![25e3, 50e3, 100e3, 1e6, 10e6, 100e6, 300e6, 400e6],
                ..base
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if self.sweep.is_empty() {
            return Err(Error::config("sweep", "must not be empty"));
        }
        if self.sweep.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("sweep", "values must be finite and >= 0"));
        }
        if !(self.min_duration > 0.0 && self.max_duration >= self.min_duration) {
            return Err(Error::config(
                "min_duration, max_duration",
                "need 0 < min <= max",
            ));
        }
        if !(self.target_counts > 0.0) {
            return Err(Error::config("target_counts", "must be > 0"));
        }
        if !(self.saturating_mu > 0.0) || !(self.led_width >= 0.0) || !(self.holdoff >= 0.0) {
            return Err(Error::config(
                "saturating_mu, led_width, holdoff",
                "need saturating_mu > 0, led_width >= 0, holdoff >= 0",
            ));
        }
        Ok(())
    }

    /// Simulated time for a point expected to count at `rate`.
    pub fn duration_for(&self, rate: f64) -> f64 {
        let d = if rate > 0.0 {
            self.target_counts / rate
        } else {
            self.max_duration
        };
        d.clamp(self.min_duration, self.max_duration)
    }

    pub fn template(&self) -> Result<PulseTemplate> {
        let c = &self.config.chain;
        PulseTemplate::calibrated(&self.config.template, c.sample_period, c.hp_cutoff)
    }

    /// Modeling choices that are not measured values, for the manifest.
    pub fn assumptions(&self) -> Vec<String> {
        let c = &self.config;
        let mut out = vec![
            format!(
                "high-pass corner chain.hp_cutoff = {} Hz",
                c.chain.hp_cutoff
            ),
            format!(
                "sample period chain.sample_period = {} s",
                c.chain.sample_period
            ),
            format!("gaussian noise chain.noise_rms = {} mV", c.chain.noise_rms),
            format!(
                "amplifier {:?} at {:?}, sat_level = {} mV",
                c.chain.amp_mode, c.chain.amp_position, c.chain.sat_level
            ),
            format!(
                "discriminator triggers above {} mV, re-arms below {} mV, min_separation = {} s",
                c.discriminator.threshold,
                c.discriminator.rearm_level,
                c.discriminator.min_separation
            ),
            format!(
                "amplitude gate {} s after each trigger",
                c.discriminator.gate
            ),
            format!(
                "pixel grid {} x {}, 4-neighbor cross-talk, mode {:?}, coincidence window {} s",
                c.device.rows, c.device.cols, c.device.crosstalk_mode, c.device.coincidence_window
            ),
            format!(
                "template rise {} s, fall {} s, calibrated to {} mV after filtering",
                c.template.tau_rise, c.template.tau_fall, c.template.peak_mv
            ),
        ];
        match self.name {
            ExperimentKind::Multiphoton => {
                out.push("a0 values other than 0.2 are illustrative choices".into());
                out.push(format!(
                    "gain {}",
                    c.discriminator.gain_mv.map_or(
                        "calibrated from the amplitude histogram".into(),
                        |g| format!("{g} mV")
                    )
                ));
            }
            ExperimentKind::Saturation => out.push(format!(
                "LED pulses {} s wide with {} mean photons; SiPM counted with a {} s hold-off",
                self.led_width, self.saturating_mu, self.holdoff
            )),
            ExperimentKind::Pulsed430 => out.push(
                "dark rate estimated from the mu = 0 point and subtracted before the fit".into(),
            ),
            ExperimentKind::Cw => out.push(format!(
                "resolving time stats.tau_res = {} s",
                c.stats.tau_res
            )),
            ExperimentKind::PowerMeter => out.push(format!(
                "sensitivity floor at twice the dark rate ({} Hz)",
                2.0 * c.device.effective_dark_rate()
            )),
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Tables, plot and summary lines produced by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub results: CsvTable,
    pub models: CsvTable,
    /// Further tables as (file-name suffix, table).
    pub extra: Vec<(String, CsvTable)>,
    pub plot: Plot,
    pub summary: Vec<String>,
}

impl ExperimentOutput {
    /// All tables with their file stems.
    pub fn tables(&self) -> Vec<(String, &CsvTable)> {
        let mut out = vec![
            (format!("{}_results", self.kind), &self.results),
            (format!("{}_models", self.kind), &self.models),
        ];
        out.extend(
            self.extra
                .iter()
                .map(|(s, t)| (format!("{}_{s}", self.kind), t)),
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub code_version: String,
    pub rng_algorithm: String,
    /// Seconds since the Unix epoch when the run started.
    pub created_unix: u64,
    pub outputs: Vec<String>,
    pub defaulted: Vec<String>,
    pub assumptions: Vec<String>,
    pub spec: ExperimentSpec,
}

impl RunManifest {
    pub fn new(spec: &ExperimentSpec, defaulted: Vec<String>, outputs: Vec<String>) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            rng_algorithm: RNG_ALGORITHM.into(),
            created_unix,
            outputs,
            defaulted,
            assumptions: spec.assumptions(),
            spec: spec.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: RunManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        m.spec.validate()?;
        Ok(m)
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    match spec.name {
        ExperimentKind::Multiphoton => Ok(multiphoton::run(spec)?.output()),
        ExperimentKind::Saturation => Ok(saturation::run(spec)?.output()),
        ExperimentKind::Pulsed430 => Ok(pulsed::run(spec)?.output()),
        ExperimentKind::Cw => Ok(cw::run(spec)?.output()),
        ExperimentKind::PowerMeter => Ok(power_meter::run(spec)?.output()),
    }
}

/// Write CSV tables, the manifest and optionally the SVG plot into `dir`.
pub fn write_run(
    dir: &Path,
    spec: &ExperimentSpec,
    defaulted: Vec<String>,
    output: &ExperimentOutput,
    with_plot: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (stem, table) in output.tables() {
        let p = dir.join(format!("{stem}.csv"));
        table.write(&p)?;
        written.push(p);
    }
    if with_plot {
        let p = dir.join(format!("{}.svg", output.kind));
        std::fs::write(&p, output.plot.to_svg())?;
        written.push(p);
    }
    let manifest_path = dir.join(format!("{}_manifest.toml", output.kind));
    let names = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = RunManifest::new(spec, defaulted, names);
    std::fs::write(&manifest_path, manifest.to_toml()?)?;
    written.push(manifest_path);
    Ok(written)
}

/// Re-run the experiment recorded in a manifest, writing into `dir`.
pub fn rerun_manifest(manifest: &Path, dir: &Path, with_plot: bool) -> Result<Vec<PathBuf>> {
    let m = RunManifest::load(manifest)?;
    let out = run_experiment(&m.spec)?;
    write_run(dir, &m.spec, m.defaulted, &out, with_plot)
}

/// Stream events through the analog chain and the discriminator without
/// holding the whole waveform in memory.
pub fn count_streaming(
    events: &[AvalancheEvent],
    tpl: &PulseTemplate,
    chain: &ChainConfig,
    disc: &DiscriminatorConfig,
    window: (f64, f64),
    noise_seed: u64,
) -> Result<u64> {
    let mut analog = AnalogChain::new(events, *tpl, chain, window, noise_seed)?;
    let mut finder = PeakFinder::new(disc, window.0, chain.sample_period, false);
    let mut buf = vec![0.0; CHUNK_SAMPLES.min(analog.total_samples().max(1))];
    loop {
        let n = analog.next_chunk(&mut buf);
        if n == 0 {
            break;
        }
        finder.feed(&buf[..n]);
    }
    Ok(finder.finish().count)
}

/// Ordinary least squares `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}
