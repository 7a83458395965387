//! Photon-number statistics of weak coherent pulses.
//!
//! Each trigger is an independent short record: one coherent bunch arrives
//! [`PRE_TRIGGER`] after the record start, the device and analog chain are
//! simulated, and the maximum inside the gate is classified into a number of
//! simultaneous detections.

use rayon::prelude::*;

use super::{ExperimentKind, ExperimentOutput, ExperimentSpec};
use crate::analog::{render, ChainConfig, PulseTemplate};
use crate::config::SimConfig;
use crate::device::{AvalancheEvent, SipmDevice};
use crate::discriminate::{
    calibrate_gain, classify_amplitudes, measure_amplitudes, Classification,
};
use crate::io::CsvTable;
use crate::plot::{Plot, Series, Style};
use crate::rng::{derive_seed, stage};
use crate::source::{generate_pulsed, SourceConfig};
use crate::stats::{
    crosstalk_redistribute, estimate_pct, mean_from_p0, CrosstalkModel, DetectionDistribution,
    PctEstimate,
};
use crate::{Error, Result};

/// Bunch arrival time within each trigger record, s.
pub const PRE_TRIGGER: f64 = 2e-9;
/// Histogram bin width for gain calibration, mV.
pub const GAIN_BIN_MV: f64 = 1.0;

/// Fixed per-trigger setup shared by all trials of one sweep point.
#[derive(Debug, Clone)]
pub struct TriggerSetup {
    source: SourceConfig,
    device: SipmDevice,
    tpl: PulseTemplate,
    chain: ChainConfig,
    gate: f64,
    window: (f64, f64),
}

impl TriggerSetup {
    pub fn new(cfg: &SimConfig, a0: f64) -> Result<Self> {
        if !(a0 > 0.0) {
            return Err(Error::domain(format!("a0 = {a0} must be > 0")));
        }
        if !(cfg.device.eta > 0.0) {
            return Err(Error::config(
                "device.eta",
                "must be > 0 to reach a detection mean",
            ));
        }
        let chain = cfg.chain.clone();
        let gate = cfg.discriminator.gate;
        let length = PRE_TRIGGER + gate + chain.sample_period;
        let source = SourceConfig {
            mu: a0 / cfg.device.eta,
            rep_rate: 1.0 / length,
            pulse_width: 0.0,
            phase: PRE_TRIGGER,
            duration: length,
            ..SourceConfig::default()
        };
        Ok(Self {
            source,
            device: SipmDevice::new(&cfg.device)?,
            tpl: PulseTemplate::calibrated(&cfg.template, chain.sample_period, chain.hp_cutoff)?,
            chain,
            gate,
            window: (0.0, length),
        })
    }

    /// Mean photons per bunch.
    pub fn mu(&self) -> f64 {
        self.source.mu
    }

    pub fn events(&self, seed: u64) -> Result<Vec<AvalancheEvent>> {
        let arrivals = generate_pulsed(&self.source, derive_seed(seed, stage::SOURCE, 0))?;
        Ok(self
            .device
            .simulate(&arrivals, derive_seed(seed, stage::DEVICE, 0)))
    }

    /// Gate maximum of one trigger, and whether the record had any avalanche.
    pub fn amplitude(&self, seed: u64) -> Result<f64> {
        let events = self.events(seed)?;
        let w = render(
            &events,
            &self.tpl,
            &self.chain,
            self.window,
            derive_seed(seed, stage::NOISE, 0),
        )?;
        Ok(measure_amplitudes(&w, &[PRE_TRIGGER], self.gate)?.values[0])
    }
}

fn point_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, stage::SWEEP, index as u64)
}

fn trial_seed(point: u64, trial: u64) -> u64 {
    derive_seed(point, stage::TRIAL, trial)
}

/// Gate maxima of `trials` independent triggers.
pub fn simulate_amplitudes(cfg: &SimConfig, a0: f64, trials: u64, seed: u64) -> Result<Vec<f64>> {
    let setup = TriggerSetup::new(cfg, a0)?;
    (0..trials)
        .into_par_iter()
        .map(|i| setup.amplitude(trial_seed(seed, i)))
        .collect()
}

/// Histogram of avalanches per trigger straight from the device model.
pub fn multiplicity_counts(cfg: &SimConfig, a0: f64, trials: u64, seed: u64) -> Result<Vec<u64>> {
    let setup = TriggerSetup::new(cfg, a0)?;
    let per_trial: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|i| setup.events(trial_seed(seed, i)).map(|e| e.len()))
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; per_trial.iter().copied().max().unwrap_or(0) + 1];
    per_trial.into_iter().for_each(|n| counts[n] += 1);
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiphotonPoint {
    pub a0: f64,
    pub mu: f64,
    pub classification: Classification,
    pub a0_estimate: Option<f64>,
    pub p_ct: std::result::Result<PctEstimate, String>,
    pub poisson: DetectionDistribution,
    pub model: DetectionDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiphotonResult {
    pub p_ct_configured: f64,
    pub points: Vec<MultiphotonPoint>,
}

/// Classify amplitudes and compare against both models.
pub fn analyze(cfg: &SimConfig, a0: f64, mu: f64, amps: &[f64]) -> Result<MultiphotonPoint> {
    let noise = cfg.chain.noise_rms;
    let gain = match cfg.discriminator.gain_mv {
        Some(g) => g,
        None => calibrate_gain(amps, GAIN_BIN_MV, (8.0 * noise).max(20.0))?,
    };
    let classification = classify_amplitudes(amps, gain, noise)?;
    let d = &classification.distribution;
    let (p0, p1) = (d.p(0), d.p(1));
    let a0_estimate = mean_from_p0(p0).ok();
    let p_ct = estimate_pct(p0, p1).map_err(|e| e.to_string());
    let n_max = cfg.stats.n_max.max(d.n_max());
    let poisson = DetectionDistribution::poisson(a0, n_max)?;
    let mut model = crosstalk_redistribute(&poisson, &CrosstalkModel::new(cfg.device.p_ct)?);
    if cfg.stats.renormalize {
        model = model.normalized();
    }
    Ok(MultiphotonPoint {
        a0,
        mu,
        classification,
        a0_estimate,
        p_ct,
        poisson,
        model,
    })
}

pub fn run(spec: &ExperimentSpec) -> Result<MultiphotonResult> {
    let cfg = &spec.config;
    let points = spec
        .sweep
        .iter()
        .enumerate()
        .map(|(k, &a0)| {
            let amps = simulate_amplitudes(cfg, a0, spec.trials, point_seed(spec.seed(), k))?;
            analyze(cfg, a0, a0 / cfg.device.eta, &amps)
        })
        .collect::<Result<_>>()?;
    Ok(MultiphotonResult {
        p_ct_configured: cfg.device.p_ct,
        points,
    })
}

impl MultiphotonResult {
    pub fn output(&self) -> ExperimentOutput {
        let mut results = CsvTable::new(&["a0", "n", "count", "probability", "ci_low", "ci_high"]);
        let mut models = CsvTable::new(&["a0", "n", "measured", "poisson", "crosstalk_model"]);
        let mut summary_t = CsvTable::new(&[
            "a0",
            "mu",
            "triggers",
            "gain_mv",
            "p0",
            "p1",
            "a0_estimated",
            "p_ct_configured",
            "p_ct_estimated",
            "p_ct_clamped",
        ]);
        let mut plot = Plot::new("Simultaneous detections", "n", "probability").log_y();
        let mut summary = Vec::new();
        for pt in &self.points {
            let c = &pt.classification;
            let d = &c.distribution;
            for (n, (&k, &(lo, hi))) in c.counts.iter().zip(&c.intervals).enumerate() {
                results.push([
                    pt.a0.to_string(),
                    n.to_string(),
                    k.to_string(),
                    d.p(n).to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ]);
            }
            let rows = d.n_max().max(10).min(pt.model.n_max());
            for n in 0..=rows {
                models.push([
                    pt.a0.to_string(),
                    n.to_string(),
                    d.p(n).to_string(),
                    pt.poisson.p(n).to_string(),
                    pt.model.p(n).to_string(),
                ]);
            }
            let (pct, clamped) = match &pt.p_ct {
                Ok(e) => (e.p_ct.to_string(), e.clamped_negative.to_string()),
                Err(_) => ("nan".to_string(), "false".to_string()),
            };
            summary_t.push([
                pt.a0.to_string(),
                pt.mu.to_string(),
                c.total().to_string(),
                c.gain.to_string(),
                d.p(0).to_string(),
                d.p(1).to_string(),
                pt.a0_estimate.map_or("nan".into(), |v| v.to_string()),
                self.p_ct_configured.to_string(),
                pct,
                clamped,
            ]);
            summary.push(match &pt.p_ct {
                Ok(e) => format!(
                    "a0 = {}: estimated p_ct = {:.4} (configured {})",
                    pt.a0, e.p_ct, self.p_ct_configured
                ),
                Err(msg) => format!("a0 = {}: p_ct not estimable: {msg}", pt.a0),
            });
            let pts = |f: &dyn Fn(usize) -> f64| (0..=rows).map(|n| (n as f64, f(n))).collect();
            plot = plot
                .with(Series::new(
                    format!("a0={} MC", pt.a0),
                    pts(&|n| d.p(n)),
                    Style::Markers,
                ))
                .with(Series::new(
                    format!("a0={} Poisson", pt.a0),
                    pts(&|n| pt.poisson.p(n)),
                    Style::Dashed,
                ))
                .with(Series::new(
                    format!("a0={} cross-talk", pt.a0),
                    pts(&|n| pt.model.p(n)),
                    Style::Line,
                ));
        }
        ExperimentOutput {
            kind: ExperimentKind::Multiphoton,
            results,
            models,
            extra: vec![("summary".into(), summary_t)],
            plot,
            summary,
        }
    }
}
