//! Count rate under saturating LED pulses: single APD against the SiPM chain.

use rayon::prelude::*;

use super::{count_streaming, ExperimentKind, ExperimentOutput, ExperimentSpec};
use crate::device::{simulate_apd, SipmDevice};
use crate::io::CsvTable;
use crate::plot::{Plot, Series, Style};
use crate::rng::{derive_seed, stage};
use crate::source::{generate_pulsed, SourceConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationPoint {
    pub frequency: f64,
    pub duration: f64,
    pub pulses: usize,
    pub apd_rate: f64,
    pub sipm_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationResult {
    pub apd_dead_time: f64,
    pub points: Vec<SaturationPoint>,
}

/// Registered rate of a dead-time-limited detector that fires on every pulse it can.
pub fn apd_pulsed_model(frequency: f64, dead_time: f64) -> f64 {
    let periods = (frequency * dead_time - 1e-9).ceil().max(1.0);
    frequency / periods
}

pub fn run(spec: &ExperimentSpec) -> Result<SaturationResult> {
    let cfg = &spec.config;
    let device = SipmDevice::new(&cfg.device)?;
    let tpl = spec.template()?;
    let mut disc = cfg.discriminator.clone();
    disc.min_separation = disc.min_separation.max(spec.holdoff);
    let points = spec
        .sweep
        .par_iter()
        .enumerate()
        .map(|(k, &f)| {
            let seed = derive_seed(spec.seed(), stage::SWEEP, k as u64);
            let duration = spec.duration_for(f);
            let source = SourceConfig {
                mu: spec.saturating_mu,
                rep_rate: f,
                pulse_width: spec.led_width,
                phase: 0.0,
                duration,
                ..SourceConfig::default()
            };
            let arrivals = generate_pulsed(&source, derive_seed(seed, stage::SOURCE, 0))?;
            let apd = simulate_apd(&arrivals, &cfg.apd, derive_seed(seed, stage::APD, 0))?;
            let events = device.simulate(&arrivals, derive_seed(seed, stage::DEVICE, 0));
            let count = count_streaming(
                &events,
                &tpl,
                &cfg.chain,
                &disc,
                (0.0, duration),
                derive_seed(seed, stage::NOISE, 0),
            )?;
            Ok(SaturationPoint {
                frequency: f,
                duration,
                pulses: source.pulse_times().len(),
                apd_rate: apd.len() as f64 / duration,
                sipm_rate: count as f64 / duration,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SaturationResult {
        apd_dead_time: cfg.apd.dead_time,
        points,
    })
}

impl SaturationResult {
    pub fn output(&self) -> ExperimentOutput {
        let mut results = CsvTable::new(&[
            "frequency_hz",
            "duration_s",
            "pulses",
            "apd_rate_hz",
            "sipm_rate_hz",
            "sipm_relative_error",
        ]);
        let mut models = CsvTable::new(&["frequency_hz", "ideal_rate_hz", "apd_model_hz"]);
        let mut summary = Vec::new();
        for p in &self.points {
            results.push([
                p.frequency.to_string(),
                p.duration.to_string(),
                p.pulses.to_string(),
                p.apd_rate.to_string(),
                p.sipm_rate.to_string(),
                (p.sipm_rate / p.frequency - 1.0).to_string(),
            ]);
            models.push([
                p.frequency.to_string(),
                p.frequency.to_string(),
                apd_pulsed_model(p.frequency, self.apd_dead_time).to_string(),
            ]);
        }
        if let Some(last) = self.points.last() {
            summary.push(format!(
                "f = {} MHz: APD {:.2} MHz, SiPM {:.2} MHz",
                last.frequency / 1e6,
                last.apd_rate / 1e6,
                last.sipm_rate / 1e6
            ));
        }
        let mhz = |f: fn(&SaturationPoint) -> f64| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .map(|p| (p.frequency / 1e6, f(p) / 1e6))
                .collect()
        };
        let plot = Plot::new(
            "Saturated pulse counting",
            "pulse rate (MHz)",
            "count rate (MHz)",
        )
        .with(Series::new("ideal", mhz(|p| p.frequency), Style::Dashed))
        .with(Series::new("APD", mhz(|p| p.apd_rate), Style::Markers))
        .with(Series::new("SiPM", mhz(|p| p.sipm_rate), Style::Markers));
        ExperimentOutput {
            kind: ExperimentKind::Saturation,
            results,
            models,
            extra: Vec::new(),
            plot,
            summary,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apd_model_steps() {
        assert_eq!(apd_pulsed_model(10e6, 50e-9), 10e6);
        assert_eq!(apd_pulsed_model(20e6, 50e-9), 20e6);
        assert_eq!(apd_pulsed_model(40e6, 50e-9), 20e6);
        assert!((apd_pulsed_model(30e6, 50e-9) - 15e6).abs() < 1e-6);
    }
}
