//! Count rate of an attenuated 430 MHz mode-locked pulse train.

use rayon::prelude::*;

use super::{count_streaming, ExperimentKind, ExperimentOutput, ExperimentSpec};
use crate::analog::AmpMode;
use crate::device::SipmDevice;
use crate::io::CsvTable;
use crate::plot::{Plot, Series, Style};
use crate::rng::{derive_seed, stage};
use crate::source::{generate_pulsed, SourceConfig};
use crate::stats::fit::{fit_constant_efficiency, RatePoint};
use crate::stats::{pulsed_count_rate, EfficiencyModel};
use crate::Result;

pub const REP_RATE: f64 = 430e6;
pub const PULSE_WIDTH: f64 = 10e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsedPoint {
    pub mu: f64,
    pub duration: f64,
    pub counts: u64,
    pub count_rate: f64,
    pub soft_count_rate: Option<f64>,
}

impl PulsedPoint {
    pub fn incident_rate(&self) -> f64 {
        self.mu * REP_RATE
    }

    pub fn count_rate_err(&self) -> f64 {
        (self.counts as f64).sqrt() / self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulsedResult {
    pub points: Vec<PulsedPoint>,
    /// Rate of the mu = 0 point, if the sweep has one.
    pub dark_rate: f64,
    /// Constant efficiency fitted to the dark-subtracted low-rate points.
    pub fitted_eta: std::result::Result<f64, String>,
    pub eta_low_rate: f64,
    pub efficiency: EfficiencyModel,
    pub rate_cutoff: f64,
}

pub fn run(spec: &ExperimentSpec) -> Result<PulsedResult> {
    let cfg = &spec.config;
    let device = SipmDevice::new(&cfg.device)?;
    let tpl = spec.template()?;
    let linear = crate::analog::ChainConfig {
        amp_mode: AmpMode::Linear,
        ..cfg.chain.clone()
    };
    let soft = crate::analog::ChainConfig {
        amp_mode: AmpMode::Soft,
        ..cfg.chain.clone()
    };
    let constant = EfficiencyModel::Constant {
        eta: cfg.stats.eta_low_rate,
    };
    let dark = cfg.device.effective_dark_rate();
    let points: Vec<PulsedPoint> = spec
        .sweep
        .par_iter()
        .enumerate()
        .map(|(k, &mu)| {
            let seed = derive_seed(spec.seed(), stage::SWEEP, k as u64);
            let expected = pulsed_count_rate(REP_RATE, mu, &constant) + dark;
            let duration = spec.duration_for(expected);
            let source = SourceConfig {
                mu,
                rep_rate: REP_RATE,
                pulse_width: PULSE_WIDTH,
                phase: 0.0,
                duration,
                ..SourceConfig::default()
            };
            let arrivals = generate_pulsed(&source, derive_seed(seed, stage::SOURCE, 0))?;
            let events = device.simulate(&arrivals, derive_seed(seed, stage::DEVICE, 0));
            let window = (0.0, duration);
            let noise_seed = derive_seed(seed, stage::NOISE, 0);
            let counts = count_streaming(
                &events,
                &tpl,
                &linear,
                &cfg.discriminator,
                window,
                noise_seed,
            )?;
            let soft_count_rate = if spec.soft_variant {
                let c =
                    count_streaming(&events, &tpl, &soft, &cfg.discriminator, window, noise_seed)?;
                Some(c as f64 / duration)
            } else {
                None
            };
            Ok(PulsedPoint {
                mu,
                duration,
                counts,
                count_rate: counts as f64 / duration,
                soft_count_rate,
            })
        })
        .collect::<Result<_>>()?;
    let dark_rate = points
        .iter()
        .find(|p| p.mu == 0.0)
        .map_or(0.0, |p| p.count_rate);
    let fit_points: Vec<RatePoint> = points
        .iter()
        .filter(|p| p.mu > 0.0)
        .map(|p| RatePoint {
            mu: p.mu,
            rate: p.count_rate - dark_rate,
        })
        .collect();
    let fitted_eta = fit_constant_efficiency(&fit_points, REP_RATE, cfg.stats.rate_cutoff)
        .map(|f| f.eta)
        .map_err(|e| e.to_string());
    Ok(PulsedResult {
        points,
        dark_rate,
        fitted_eta,
        eta_low_rate: cfg.stats.eta_low_rate,
        efficiency: cfg.stats.efficiency,
        rate_cutoff: cfg.stats.rate_cutoff,
    })
}

impl PulsedResult {
    pub fn output(&self) -> ExperimentOutput {
        let constant = EfficiencyModel::Constant {
            eta: self.eta_low_rate,
        };
        let mut results = CsvTable::new(&[
            "mu",
            "incident_rate",
            "duration_s",
            "counts",
            "count_rate",
            "count_rate_err",
            "count_rate_soft_amp",
        ]);
        let mut models = CsvTable::new(&[
            "mu",
            "incident_rate",
            "count_rate",
            "model_const_eta",
            "model_eta_mu",
        ]);
        for p in &self.points {
            results.push([
                p.mu.to_string(),
                p.incident_rate().to_string(),
                p.duration.to_string(),
                p.counts.to_string(),
                p.count_rate.to_string(),
                p.count_rate_err().to_string(),
                p.soft_count_rate.map_or("nan".into(), |r| r.to_string()),
            ]);
            models.push([
                p.mu.to_string(),
                p.incident_rate().to_string(),
                p.count_rate.to_string(),
                pulsed_count_rate(REP_RATE, p.mu, &constant).to_string(),
                pulsed_count_rate(REP_RATE, p.mu, &self.efficiency).to_string(),
            ]);
        }
        let mut summary = vec![format!("dark rate from mu = 0: {:.0} Hz", self.dark_rate)];
        summary.push(match &self.fitted_eta {
            Ok(eta) => format!(
                "constant efficiency fitted below {} MHz: {eta:.4} (configured {})",
                self.rate_cutoff / 1e6,
                self.eta_low_rate
            ),
            Err(e) => format!("constant efficiency fit failed: {e}"),
        });
        let mhz = |f: &dyn Fn(&PulsedPoint) -> Option<f64>| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .filter(|p| p.mu > 0.0)
                .filter_map(|p| Some((p.incident_rate() / 1e6, f(p)? / 1e6)))
                .collect()
        };
        let plot = Plot::new(
            "430 MHz pulsed counting",
            "incident photon rate (MHz)",
            "count rate (MHz)",
        )
        .log_x()
        .log_y()
        .with(Series::new(
            "MC linear",
            mhz(&|p| Some(p.count_rate)),
            Style::Markers,
        ))
        .with(Series::new(
            "MC soft amp",
            mhz(&|p| p.soft_count_rate),
            Style::Markers,
        ))
        .with(Series::new(
            "constant eta",
            mhz(&|p| Some(pulsed_count_rate(REP_RATE, p.mu, &constant))),
            Style::Dashed,
        ))
        .with(Series::new(
            "eta(mu)",
            mhz(&|p| Some(pulsed_count_rate(REP_RATE, p.mu, &self.efficiency))),
            Style::Line,
        ));
        ExperimentOutput {
            kind: ExperimentKind::Pulsed430,
            results,
            models,
            extra: Vec::new(),
            plot,
            summary,
        }
    }
}
