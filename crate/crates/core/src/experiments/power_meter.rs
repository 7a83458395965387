//! Count rate to optical power, using the calibrated pulsed response.

use super::{ExperimentKind, ExperimentOutput, ExperimentSpec};
use crate::io::CsvTable;
use crate::plot::{Plot, Series, Style};
use crate::stats::{invert_pulsed_count_rate, photon_rate_to_power, EfficiencyModel};
use crate::Result;

use super::pulsed::REP_RATE;

/// Largest mean photon number searched when inverting the rate curve.
pub const MU_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub incident_rate: f64,
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub count_rate: f64,
    pub constant: Option<Inference>,
    pub eta_mu: Option<Inference>,
    pub below_floor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerMeterResult {
    pub wavelength: f64,
    pub dark_rate: f64,
    pub points: Vec<PowerPoint>,
    /// Incident-rate endpoints `(floor, ceiling)` under the η(μ) calibration.
    pub dynamic_range: Option<(Inference, Inference)>,
}

/// Incident photon rate and power that produce `count_rate`.
pub fn infer(count_rate: f64, model: &EfficiencyModel, wavelength: f64) -> Option<Inference> {
    let mu = invert_pulsed_count_rate(count_rate, REP_RATE, model, MU_MAX)?;
    let incident_rate = mu * REP_RATE;
    Some(Inference {
        incident_rate,
        power: photon_rate_to_power(incident_rate, wavelength),
    })
}

pub fn run(spec: &ExperimentSpec) -> Result<PowerMeterResult> {
    let cfg = &spec.config;
    let wavelength = cfg.stats.wavelength;
    let constant = EfficiencyModel::constant(cfg.stats.eta_low_rate)?;
    let eta_mu = cfg.stats.efficiency;
    let dark_rate = cfg.device.effective_dark_rate();
    let floor = 2.0 * dark_rate;
    let points = spec
        .sweep
        .iter()
        .map(|&c| PowerPoint {
            count_rate: c,
            constant: infer(c, &constant, wavelength),
            eta_mu: infer(c, &eta_mu, wavelength),
            below_floor: c < floor,
        })
        .collect();
    // highest count rate the η(μ) curve reaches below MU_MAX
    let top = crate::stats::pulsed_count_rate(REP_RATE, MU_MAX, &eta_mu) * (1.0 - 1e-9);
    let dynamic_range = infer(floor, &eta_mu, wavelength).zip(infer(top, &eta_mu, wavelength));
    Ok(PowerMeterResult {
        wavelength,
        dark_rate,
        points,
        dynamic_range,
    })
}

impl PowerMeterResult {
    pub fn output(&self) -> ExperimentOutput {
        let f = |v: Option<Inference>, g: fn(Inference) -> f64| {
            v.map_or("nan".into(), |i| g(i).to_string())
        };
        let mut results = CsvTable::new(&[
            "count_rate",
            "inferred_incident_rate",
            "inferred_power",
            "below_sensitivity_floor",
        ]);
        let mut models = CsvTable::new(&[
            "count_rate",
            "incident_rate_const_eta",
            "power_const_eta",
            "incident_rate_eta_mu",
            "power_eta_mu",
        ]);
        for p in &self.points {
            results.push([
                p.count_rate.to_string(),
                f(p.constant, |i| i.incident_rate),
                f(p.constant, |i| i.power),
                p.below_floor.to_string(),
            ]);
            models.push([
                p.count_rate.to_string(),
                f(p.constant, |i| i.incident_rate),
                f(p.constant, |i| i.power),
                f(p.eta_mu, |i| i.incident_rate),
                f(p.eta_mu, |i| i.power),
            ]);
        }
        let mut summary = Vec::new();
        if let Some((lo, hi)) = self.dynamic_range {
            summary.push(format!(
                "dynamic range {:.3e} W to {:.3e} W ({:.3e} to {:.3e} photons/s at {} nm)",
                lo.power,
                hi.power,
                lo.incident_rate,
                hi.incident_rate,
                self.wavelength * 1e9
            ));
        }
        let pts = |g: fn(&PowerPoint) -> Option<Inference>| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .filter_map(|p| Some((p.count_rate, g(p)?.power)))
                .filter(|&(c, _)| c > 0.0)
                .collect()
        };
        let plot = Plot::new(
            "Power meter calibration",
            "count rate (Hz)",
            "optical power (W)",
        )
        .log_x()
        .log_y()
        .with(Series::new(
            "constant eta",
            pts(|p| p.constant),
            Style::Dashed,
        ))
        .with(Series::new("eta(mu)", pts(|p| p.eta_mu), Style::Line));
        ExperimentOutput {
            kind: ExperimentKind::PowerMeter,
            results,
            models,
            extra: Vec::new(),
            plot,
            summary,
        }
    }
}
