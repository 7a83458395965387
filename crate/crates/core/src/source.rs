//! Photon arrival streams at the detector plane.
//!
//! Two source kinds are supported: a pulsed coherent source (mode-locked laser,
//! or a modulated LED modeled as wide pulses) and a continuous-wave source.
//! Illumination is uniform over the array, so the device module assigns
//! pixels; the source only produces timestamps.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from_seed, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Pulsed,
    Cw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// Mean photons per pulse.
    pub mu: f64,
    /// Pulse repetition rate, Hz.
    pub rep_rate: f64,
    /// Photons of one pulse are spread uniformly over this width, s.
    pub pulse_width: f64,
    /// Time of the first pulse, s.
    pub phase: f64,
    /// CW photon rate, Hz.
    pub photon_rate: f64,
    /// Length of the stream, s.
    pub duration: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::Pulsed,
            mu: 0.2,
            rep_rate: 430e6,
            pulse_width: 10e-12,
            phase: 0.0,
            photon_rate: 1e6,
            duration: 1e-6,
        }
    }
}

impl SourceConfig {
    pub fn pulsed(mu: f64, rep_rate: f64, duration: f64) -> Self {
        Self {
            kind: SourceKind::Pulsed,
            mu,
            rep_rate,
            duration,
            ..Self::default()
        }
    }

    pub fn cw(photon_rate: f64, duration: f64) -> Self {
        Self {
            kind: SourceKind::Cw,
            photon_rate,
            duration,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::config(
                "source.duration",
                format!("{} must be > 0", self.duration),
            ));
        }
        match self.kind {
            SourceKind::Pulsed => {
                if !(self.mu >= 0.0) || !self.mu.is_finite() {
                    return Err(Error::config(
                        "source.mu",
                        format!("{} must be >= 0", self.mu),
                    ));
                }
                if !(self.rep_rate > 0.0) || !self.rep_rate.is_finite() {
                    return Err(Error::config(
                        "source.rep_rate",
                        format!("{} must be > 0", self.rep_rate),
                    ));
                }
                if !(self.pulse_width >= 0.0) || self.pulse_width >= 1.0 / self.rep_rate {
                    return Err(Error::config(
                        "source.pulse_width",
                        format!(
                            "{} must be >= 0 and shorter than the pulse period",
                            self.pulse_width
                        ),
                    ));
                }
                if !(self.phase >= 0.0) {
                    return Err(Error::config("source.phase", "must be >= 0"));
                }
            }
            SourceKind::Cw => {
                if !(self.photon_rate >= 0.0) || !self.photon_rate.is_finite() {
                    return Err(Error::config(
                        "source.photon_rate",
                        format!("{} must be >= 0", self.photon_rate),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Mean incident photon rate at the detector, Hz.
    pub fn incident_rate(&self) -> f64 {
        match self.kind {
            SourceKind::Pulsed => self.mu * self.rep_rate,
            SourceKind::Cw => self.photon_rate,
        }
    }

    /// Start times of the pulses that fit entirely inside `[0, duration]`.
    pub fn pulse_times(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u64;
        loop {
            let t = self.phase + i as f64 / self.rep_rate;
            if t >= self.duration || t + self.pulse_width > self.duration {
                break;
            }
            out.push(t);
            i += 1;
        }
        out
    }
}

/// Time-ordered photon timestamps plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonArrivals {
    pub times: Vec<f64>,
    pub source: SourceConfig,
}

impl PhotonArrivals {
    pub fn empty(source: SourceConfig) -> Self {
        Self {
            times: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.source.duration
    }

    pub fn is_sorted(&self) -> bool {
        self.times.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Generate according to `cfg.kind`.
pub fn generate(cfg: &SourceConfig, seed: u64) -> Result<PhotonArrivals> {
    match cfg.kind {
        SourceKind::Pulsed => generate_pulsed(cfg, seed),
        SourceKind::Cw => generate_cw(cfg, seed),
    }
}

/// Poisson(mu) photons per pulse, each uniformly placed inside the pulse width.
pub fn generate_pulsed(cfg: &SourceConfig, seed: u64) -> Result<PhotonArrivals> {
    if cfg.kind != SourceKind::Pulsed {
        return Err(Error::domain(
            "generate_pulsed needs a pulsed source config",
        ));
    }
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut times = Vec::new();
    if cfg.mu == 0.0 {
        return Ok(PhotonArrivals {
            times,
            source: cfg.clone(),
        });
    }
    let poisson = Poisson::new(cfg.mu).map_err(|e| Error::domain(e.to_string()))?;
    for t0 in cfg.pulse_times() {
        let k = poisson.sample(&mut rng) as usize;
        push_pulse(&mut rng, &mut times, t0, cfg.pulse_width, k);
    }
    Ok(PhotonArrivals {
        times,
        source: cfg.clone(),
    })
}

fn push_pulse(rng: &mut SimRng, times: &mut Vec<f64>, t0: f64, width: f64, k: usize) {
    let start = times.len();
    for _ in 0..k {
        let jitter = if width > 0.0 {
            rng.random::<f64>() * width
        } else {
            0.0
        };
        times.push(t0 + jitter);
    }
    times[start..].sort_by(f64::total_cmp);
}

/// Homogeneous Poisson process with exponential inter-arrival times.
pub fn generate_cw(cfg: &SourceConfig, seed: u64) -> Result<PhotonArrivals> {
    if cfg.kind != SourceKind::Cw {
        return Err(Error::domain("generate_cw needs a cw source config"));
    }
    cfg.validate()?;
    let times = poisson_process(cfg.photon_rate, cfg.duration, &mut rng_from_seed(seed));
    Ok(PhotonArrivals {
        times,
        source: cfg.clone(),
    })
}

/// Event times of a homogeneous Poisson process on `[0, duration]`.
pub(crate) fn poisson_process(rate: f64, duration: f64, rng: &mut SimRng) -> Vec<f64> {
    let mut out = Vec::new();
    if !(rate > 0.0) {
        return out;
    }
    let exp = Exp::new(rate).expect("rate > 0");
    out.reserve((rate * duration * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t > duration {
            break;
        }
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn zero_mu_is_empty() {
        let cfg = SourceConfig::pulsed(0.0, 430e6, 1e-6);
        assert!(generate_pulsed(&cfg, 3).unwrap().is_empty());
        let cfg = SourceConfig::cw(0.0, 1e-3);
        assert!(generate_cw(&cfg, 3).unwrap().is_empty());
    }

    #[test]
    fn pulsed_total_count() {
        let cfg = SourceConfig::pulsed(0.2, 430e6, 1e-3);
        let arr = generate_pulsed(&cfg, 11).unwrap();
        let expected: f64 = 0.2 * 430e6 * 1e-3;
        let sigma = expected.sqrt();
        assert!(
            (arr.len() as f64 - expected).abs() < 4.0 * sigma,
            "{}",
            arr.len()
        );
        assert!(arr.is_sorted());
        assert!(arr.times.iter().all(|&t| (0.0..=1e-3).contains(&t)));
    }

    #[test]
    fn pulse_grid_is_half_open() {
        let mut cfg = SourceConfig::pulsed(1.0, 430e6, 1e-6);
        assert_eq!(cfg.pulse_times().len(), 430);
        cfg.pulse_width = 0.0;
        assert_eq!(cfg.pulse_times().len(), 430);
    }

    #[test]
    fn saturated_pulses_all_occupied() {
        let cfg = SourceConfig::pulsed(100.0, 10e6, 10e-6);
        let arr = generate_pulsed(&cfg, 5).unwrap();
        let period = 1.0 / cfg.rep_rate;
        let mut occupied = vec![false; cfg.pulse_times().len()];
        for t in &arr.times {
            occupied[(t / period) as usize] = true;
        }
        assert!(occupied.iter().all(|&o| o));
    }

    #[test]
    fn per_pulse_counts_are_poisson() {
        // 1e5 pulses, width 0 so photons of one pulse share a timestamp
        let mu = 1.3;
        let mut cfg = SourceConfig::pulsed(mu, 1e6, 0.1);
        cfg.pulse_width = 0.0;
        let arr = generate_pulsed(&cfg, 99).unwrap();
        let n_pulses = cfg.pulse_times().len();
        assert_eq!(n_pulses, 100_000);
        let mut per_pulse = vec![0usize; n_pulses];
        for t in &arr.times {
            per_pulse[(t * 1e6).round() as usize] += 1;
        }
        let kmax = 6;
        let mut observed = vec![0.0; kmax + 1];
        for &k in &per_pulse {
            observed[k.min(kmax)] += 1.0;
        }
        let mut chi2 = 0.0;
        let mut tail = 1.0;
        for (k, obs) in observed.iter().enumerate() {
            let p = if k < kmax {
                let p = crate::stats::poisson_pmf(k as u64, mu).unwrap();
                tail -= p;
                p
            } else {
                tail
            };
            let expected = p * n_pulses as f64;
            chi2 += (obs - expected).powi(2) / expected;
        }
        let crit = ChiSquared::new(kmax as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 = {chi2}, critical {crit}");
    }

    #[test]
    fn cw_count_and_exponential_gaps() {
        let cfg = SourceConfig::cw(1e9, 100e-6);
        let arr = generate_cw(&cfg, 2024).unwrap();
        let expected: f64 = 1e5;
        assert!((arr.len() as f64 - expected).abs() < 4.0 * expected.sqrt());
        assert!(arr.is_sorted());

        // one-sample Kolmogorov-Smirnov against Exp(rate)
        let mut gaps: Vec<f64> = arr.times.windows(2).map(|w| (w[1] - w[0]) * 1e9).collect();
        gaps.sort_by(f64::total_cmp);
        let n = gaps.len() as f64;
        let d = gaps
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let cdf = 1.0 - (-g).exp();
                (cdf - i as f64 / n)
                    .abs()
                    .max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic critical value at alpha = 0.01
        let crit = 1.628 / n.sqrt();
        assert!(d < crit, "KS D = {d}, critical {crit}");
    }

    #[test]
    fn cw_mean_gap() {
        let cfg = SourceConfig::cw(1e6, 1.0);
        let arr = generate_cw(&cfg, 8).unwrap();
        let mean_gap = arr.times.last().unwrap() / arr.len() as f64;
        assert!((mean_gap - 1e-6).abs() < 0.01e-6, "{mean_gap}");
    }

    #[test]
    fn cw_window_counts_are_poisson() {
        let cfg = SourceConfig::cw(1e8, 1e-3);
        let arr = generate_cw(&cfg, 17).unwrap();
        let windows = 10_000;
        let width = cfg.duration / windows as f64;
        let mut counts = vec![0.0f64; windows];
        for t in &arr.times {
            counts[((t / width) as usize).min(windows - 1)] += 1.0;
        }
        let mean = counts.iter().sum::<f64>() / windows as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (windows - 1) as f64;
        let ratio = var / mean;
        assert!((0.95..=1.05).contains(&ratio), "variance/mean = {ratio}");
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = SourceConfig::pulsed(0.7, 100e6, 1e-5);
        assert_eq!(
            generate_pulsed(&cfg, 4).unwrap(),
            generate_pulsed(&cfg, 4).unwrap()
        );
        assert_ne!(
            generate_pulsed(&cfg, 4).unwrap(),
            generate_pulsed(&cfg, 5).unwrap()
        );
        let cfg = SourceConfig::cw(3e7, 1e-5);
        assert_eq!(generate_cw(&cfg, 4).unwrap(), generate_cw(&cfg, 4).unwrap());
    }

    #[test]
    fn validation() {
        let mut cfg = SourceConfig::pulsed(0.2, 430e6, 1e-6);
        cfg.pulse_width = 3e-9;
        assert!(cfg.validate().is_err());
        let cfg = SourceConfig::pulsed(-1.0, 430e6, 1e-6);
        assert!(cfg.validate().is_err());
        let cfg = SourceConfig::cw(1e6, 0.0);
        assert!(cfg.validate().is_err());
        assert!(generate_cw(&SourceConfig::pulsed(1.0, 1e6, 1e-6), 1).is_err());
    }
}
