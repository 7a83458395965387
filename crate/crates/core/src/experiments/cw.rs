//! Count rate under continuous-wave illumination.

use rayon::prelude::*;

use super::{count_streaming, linear_fit, ExperimentKind, ExperimentOutput, ExperimentSpec};
use crate::analog::{AmpMode, ChainConfig};
use crate::device::SipmDevice;
use crate::io::CsvTable;
use crate::plot::{Plot, Series, Style};
use crate::rng::{derive_seed, stage};
use crate::source::{generate_cw, SourceConfig};
use crate::stats::{dead_time_rate, DeadTimeModel};
use crate::Result;

/// Points counting at most this rate enter the low-rate slope fit, Hz.
pub const SLOPE_RATE_LIMIT: f64 = 3e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwPoint {
    pub incident_rate: f64,
    pub duration: f64,
    pub counts: u64,
    pub count_rate: f64,
    pub soft_count_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwResult {
    pub points: Vec<CwPoint>,
    pub eta: f64,
    pub tau_res: f64,
    /// `(intercept, slope)` of the low-rate linear fit.
    pub slope_fit: Option<(f64, f64)>,
    pub soft_slope_fit: Option<(f64, f64)>,
}

impl CwResult {
    pub fn deadtime_model(&self, incident_rate: f64) -> f64 {
        match DeadTimeModel::non_paralyzable(self.tau_res) {
            Ok(dt) => dead_time_rate(incident_rate * self.eta, &dt),
            Err(_) => incident_rate * self.eta,
        }
    }
}

fn slope(points: &[CwPoint], rate: impl Fn(&CwPoint) -> Option<f64>) -> Option<(f64, f64)> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.count_rate <= SLOPE_RATE_LIMIT)
        .filter_map(|p| Some((p.incident_rate, rate(p)?)))
        .collect();
    linear_fit(&xy)
}

pub fn run(spec: &ExperimentSpec) -> Result<CwResult> {
    let cfg = &spec.config;
    let device = SipmDevice::new(&cfg.device)?;
    let tpl = spec.template()?;
    let linear = ChainConfig {
        amp_mode: AmpMode::Linear,
        ..cfg.chain.clone()
    };
    let soft = ChainConfig {
        amp_mode: AmpMode::Soft,
        ..cfg.chain.clone()
    };
    let eta = cfg.device.eta;
    let dark = cfg.device.effective_dark_rate();
    let points: Vec<CwPoint> = spec
        .sweep
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let seed = derive_seed(spec.seed(), stage::SWEEP, k as u64);
            let duration = spec.duration_for(r * eta + dark);
            let source = SourceConfig::cw(r, duration);
            let arrivals = generate_cw(&source, derive_seed(seed, stage::SOURCE, 0))?;
            let events = device.simulate(&arrivals, derive_seed(seed, stage::DEVICE, 0));
            drop(arrivals);
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
            Ok(CwPoint {
                incident_rate: r,
                duration,
                counts,
                count_rate: counts as f64 / duration,
                soft_count_rate,
            })
        })
        .collect::<Result<_>>()?;
    let slope_fit = slope(&points, |p| Some(p.count_rate));
    let soft_slope_fit = slope(&points, |p| p.soft_count_rate);
    Ok(CwResult {
        points,
        eta,
        tau_res: cfg.stats.tau_res,
        slope_fit,
        soft_slope_fit,
    })
}

impl CwResult {
    pub fn output(&self) -> ExperimentOutput {
        let fmt_opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        let mut results = CsvTable::new(&[
            "incident_rate",
            "duration_s",
            "counts",
            "count_rate",
            "count_rate_err",
            "count_rate_soft_amp",
        ]);
        let mut models = CsvTable::new(&[
            "incident_rate",
            "count_rate",
            "linear_fit_slope",
            "linear_fit",
            "deadtime_model",
        ]);
        let slope = self.slope_fit.map(|f| f.1);
        for p in &self.points {
            results.push([
                p.incident_rate.to_string(),
                p.duration.to_string(),
                p.counts.to_string(),
                p.count_rate.to_string(),
                ((p.counts as f64).sqrt() / p.duration).to_string(),
                fmt_opt(p.soft_count_rate),
            ]);
            models.push([
                p.incident_rate.to_string(),
                p.count_rate.to_string(),
                fmt_opt(slope),
                fmt_opt(self.slope_fit.map(|(a, b)| a + b * p.incident_rate)),
                self.deadtime_model(p.incident_rate).to_string(),
            ]);
        }
        let mut summary = Vec::new();
        if let Some((_, b)) = self.slope_fit {
            summary.push(format!(
                "low-rate slope {b:.5} (configured eta {})",
                self.eta
            ));
        }
        if let Some((_, b)) = self.soft_slope_fit {
            summary.push(format!("low-rate slope with saturating amplifier {b:.5}"));
        }
        if self.tau_res > 0.0 {
            summary.push(format!(
                "pile-up ceiling 1/tau_res = {:.1} MHz",
                1e-6 / self.tau_res
            ));
        }
        let pts = |f: &dyn Fn(&CwPoint) -> Option<f64>| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .filter(|p| p.incident_rate > 0.0)
                .filter_map(|p| Some((p.incident_rate / 1e6, f(p)? / 1e6)))
                .collect()
        };
        let plot = Plot::new(
            "CW counting",
            "incident photon rate (MHz)",
            "count rate (MHz)",
        )
        .log_x()
        .log_y()
        .with(Series::new(
            "MC linear",
            pts(&|p| Some(p.count_rate)),
            Style::Markers,
        ))
        .with(Series::new(
            "MC soft amp",
            pts(&|p| p.soft_count_rate),
            Style::Markers,
        ))
        .with(Series::new(
            "dead-time model",
            pts(&|p| Some(self.deadtime_model(p.incident_rate))),
            Style::Line,
        ));
        ExperimentOutput {
            kind: ExperimentKind::Cw,
            results,
            models,
            extra: Vec::new(),
            plot,
            summary,
        }
    }
}
