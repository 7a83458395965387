//! Closed-form photon-counting statistics.
//!
//! Everything here is a pure function of its inputs. The Monte Carlo modules
//! are validated against these models, and the experiments use them for the
//! "model" columns of their output tables.

pub mod fit;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Planck constant, J·s (exact SI value).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default truncation for distributions built from analytic models.
pub const DEFAULT_N_MAX: usize = 30;

/// Empirical efficiency parameters `(p1, p2, p3)` of the rate-dependent
/// efficiency observed with the 430 MHz mode-locked laser.
pub const PULSED_ETA_PARAMS: (f64, f64, f64) = (0.03, 0.157, 0.044);

/// Low-rate constant efficiency.
pub const LOW_RATE_ETA: f64 = 0.083;

/// Below this `k` the pmf is evaluated by direct product, above it in log space.
const LOG_SPACE_K: u64 = 20;

/// Probability mass over n = 0..=n_max simultaneous detections.
///
/// The vector may be a truncation of an infinite distribution, so the sum is
/// allowed to fall short of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDistribution {
    probs: Vec<f64>,
}

impl DetectionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("distribution needs at least p(0)"));
        }
        for (n, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("p({n}) = {p} is outside [0, 1]")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::domain(format!("probabilities sum to {sum} > 1")));
        }
        Ok(Self { probs })
    }

    /// Poisson(mean) truncated at `n_max`. The untruncated sum is exactly one.
    pub fn poisson(mean: f64, n_max: usize) -> Result<Self> {
        let probs = (0..=n_max as u64)
            .map(|k| poisson_pmf(k, mean))
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs)
    }

    /// Normalized relative frequencies of integer counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::domain(
                "cannot build a distribution from zero counts",
            ));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    /// p(n), zero beyond the truncation.
    pub fn p(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Rescaled so the represented probabilities sum to one.
    pub fn normalized(&self) -> Self {
        let total = self.total();
        if total <= 0.0 {
            return self.clone();
        }
        Self {
            probs: self.probs.iter().map(|p| p / total).collect(),
        }
    }

    /// Total-variation distance, treating missing entries as zero.
    pub fn total_variation(&self, other: &Self) -> f64 {
        let len = self.probs.len().max(other.probs.len());
        0.5 * (0..len)
            .map(|n| (self.p(n) - other.p(n)).abs())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkModel {
    p_ct: f64,
}

impl CrosstalkModel {
    pub fn new(p_ct: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p_ct) {
            return Err(Error::domain(format!(
                "cross-talk probability {p_ct} not in [0, 1)"
            )));
        }
        Ok(Self { p_ct })
    }

    pub fn p_ct(&self) -> f64 {
        self.p_ct
    }
}

/// Coherent (Poissonian) light pulse with `mu` photons on average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentPulseModel {
    mu: f64,
}

impl CoherentPulseModel {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::domain(format!(
                "mean photon number {mu} must be finite and >= 0"
            )));
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Probability of exactly `k` photons in the pulse.
    pub fn pmf(&self, k: u64) -> f64 {
        poisson_pmf(k, self.mu).expect("mu validated at construction")
    }
}

/// Detection efficiency as a function of the mean photon number per pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EfficiencyModel {
    /// `eta(mu) = p1 * exp(-p2 * mu) + p3`
    Exponential {
        p1: f64,
        p2: f64,
        p3: f64,
    },
    Constant {
        eta: f64,
    },
}

impl EfficiencyModel {
    pub fn exponential(p1: f64, p2: f64, p3: f64) -> Result<Self> {
        let m = EfficiencyModel::Exponential { p1, p2, p3 };
        m.validate()?;
        Ok(m)
    }

    pub fn constant(eta: f64) -> Result<Self> {
        let m = EfficiencyModel::Constant { eta };
        m.validate()?;
        Ok(m)
    }

    /// The exponentially decreasing efficiency fitted to the pulsed data.
    pub fn pulsed_default() -> Self {
        let (p1, p2, p3) = PULSED_ETA_PARAMS;
        EfficiencyModel::Exponential { p1, p2, p3 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EfficiencyModel::Exponential { p1, p2, p3 } => {
                let sum = p1 + p3;
                if !(sum > 0.0 && sum <= 1.0) {
                    return Err(Error::domain(format!("p1 + p3 = {sum} not in (0, 1]")));
                }
                if !(p3 >= 0.0) || !(p2 >= 0.0) {
                    return Err(Error::domain("p2 and p3 must be >= 0"));
                }
                if !(p1 >= 0.0) {
                    // p1 < 0 would make eta increase with mu and can cross 1
                    return Err(Error::domain("p1 must be >= 0"));
                }
                Ok(())
            }
            EfficiencyModel::Constant { eta } => {
                if eta > 0.0 && eta <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::domain(format!(
                        "constant efficiency {eta} not in (0, 1]"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadTimeKind {
    NonParalyzable,
    Paralyzable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadTimeModel {
    tau: f64,
    kind: DeadTimeKind,
}

impl DeadTimeModel {
    pub fn new(tau: f64, kind: DeadTimeKind) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::domain(format!("dead time {tau} must be > 0")));
        }
        Ok(Self { tau, kind })
    }

    pub fn non_paralyzable(tau: f64) -> Result<Self> {
        Self::new(tau, DeadTimeKind::NonParalyzable)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn kind(&self) -> DeadTimeKind {
        self.kind
    }

    /// Highest registered rate the model can produce.
    pub fn ceiling(&self) -> f64 {
        match self.kind {
            DeadTimeKind::NonParalyzable => 1.0 / self.tau,
            // maximum of r*exp(-r*tau) at r = 1/tau
            DeadTimeKind::Paralyzable => (-1.0f64).exp() / self.tau,
        }
    }
}

/// `e^-mu * mu^k / k!`.
pub fn poisson_pmf(k: u64, mu: f64) -> Result<f64> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::domain(format!(
            "Poisson mean {mu} must be finite and >= 0"
        )));
    }
    if mu == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    if k <= LOG_SPACE_K {
        let mut term = (-mu).exp();
        for i in 1..=k {
            term *= mu / i as f64;
        }
        Ok(term)
    } else {
        let ln_p = -mu + k as f64 * mu.ln() - ln_gamma(k as f64 + 1.0);
        Ok(ln_p.exp().min(1.0))
    }
}

/// First-order cross-talk redistribution of a cross-talk-free distribution:
///
/// `p(0) = p_th(0)`,
/// `p(n) = (p_th(n) + (n-1) p(n-1) p_ct) / (1 + n p_ct)` for `n > 0`.
///
/// The result is the terminal distribution of a process in which a group of
/// `n` simultaneous avalanches gains one more with probability
/// `n p_ct / (1 + n p_ct)`, so the untruncated output sums to exactly one.
pub fn crosstalk_redistribute(
    p_th: &DetectionDistribution,
    ct: &CrosstalkModel,
) -> DetectionDistribution {
    let p_ct = ct.p_ct;
    let mut out = Vec::with_capacity(p_th.probs.len());
    out.push(p_th.probs[0]);
    for n in 1..p_th.probs.len() {
        let prev = out[n - 1];
        let nf = n as f64;
        out.push((p_th.probs[n] + (nf - 1.0) * prev * p_ct) / (1.0 + nf * p_ct));
    }
    DetectionDistribution { probs: out }
}

/// Mean of a Poisson distribution from its zero bin: `a0 = -ln p(0)`.
pub fn mean_from_p0(p0: f64) -> Result<f64> {
    if !(p0 > 0.0) {
        return Err(Error::domain(format!("p(0) = {p0}: mean is unbounded")));
    }
    if p0 > 1.0 {
        return Err(Error::domain(format!("p(0) = {p0} > 1")));
    }
    // -ln(1) is -0.0
    Ok((-p0.ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PctEstimate {
    pub p_ct: f64,
    /// The raw estimate was negative beyond 1e-6 and was reported as zero.
    pub clamped_negative: bool,
}

/// Cross-talk probability from the first two bins of a measured distribution.
///
/// With `a0 = -ln p0` the cross-talk-free single-detection probability is
/// `a0 * p0`, and inverting the n = 1 redistribution gives
/// `p_ct = a0 p0 / p1 - 1`.
pub fn estimate_pct(p0: f64, p1_meas: f64) -> Result<PctEstimate> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::domain(format!("p(0) = {p0} not in (0, 1)")));
    }
    if !(p1_meas > 0.0) {
        return Err(Error::domain(format!("p(1) = {p1_meas} must be > 0")));
    }
    let a0 = mean_from_p0(p0)?;
    let p_th1 = a0 * p0;
    let raw = p_th1 / p1_meas - 1.0;
    if raw >= 1.0 {
        return Err(Error::Estimation(format!(
            "p(1) = {p1_meas} is at most half the Poisson value {p_th1}; implied p_ct = {raw} >= 1"
        )));
    }
    if raw < -1e-6 {
        log::warn!("negative cross-talk estimate {raw} reported as 0");
        return Ok(PctEstimate {
            p_ct: 0.0,
            clamped_negative: true,
        });
    }
    Ok(PctEstimate {
        p_ct: raw.max(0.0),
        clamped_negative: false,
    })
}

/// Probability of at least one detection for a coherent pulse, `1 - e^(-mu eta)`.
pub fn detection_probability(model: &CoherentPulseModel, eta: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&eta), "eta = {eta}");
    -(-model.mu * eta).exp_m1()
}

pub fn efficiency_at(model: &EfficiencyModel, mu: f64) -> f64 {
    match *model {
        EfficiencyModel::Exponential { p1, p2, p3 } => p1 * (-p2 * mu).exp() + p3,
        EfficiencyModel::Constant { eta } => eta,
    }
}

/// Registered rate for a pulsed source: `f_rep * (1 - e^(-mu eta(mu)))`.
pub fn pulsed_count_rate(f_rep: f64, mu: f64, model: &EfficiencyModel) -> f64 {
    if mu.is_infinite() {
        return f_rep;
    }
    let eta = efficiency_at(model, mu);
    -f_rep * (-mu * eta).exp_m1()
}

/// Registered rate after dead-time losses.
pub fn dead_time_rate(true_rate: f64, dt: &DeadTimeModel) -> f64 {
    if true_rate.is_infinite() {
        return match dt.kind {
            DeadTimeKind::NonParalyzable => 1.0 / dt.tau,
            DeadTimeKind::Paralyzable => 0.0,
        };
    }
    match dt.kind {
        DeadTimeKind::NonParalyzable => true_rate / (1.0 + true_rate * dt.tau),
        DeadTimeKind::Paralyzable => true_rate * (-true_rate * dt.tau).exp(),
    }
}

/// Optical power carried by a photon flux: `rate * h c / lambda`.
pub fn photon_rate_to_power(rate: f64, wavelength: f64) -> f64 {
    rate * PLANCK * SPEED_OF_LIGHT / wavelength
}

pub fn power_to_photon_rate(power: f64, wavelength: f64) -> f64 {
    power * wavelength / (PLANCK * SPEED_OF_LIGHT)
}

/// Invert `pulsed_count_rate` for `mu` by bisection.
///
/// Returns `None` when `rate` is outside `[0, f_rep)` or the model is not
/// monotone enough to bracket a root below `mu_max`.
pub fn invert_pulsed_count_rate(
    rate: f64,
    f_rep: f64,
    model: &EfficiencyModel,
    mu_max: f64,
) -> Option<f64> {
    if !(rate >= 0.0) || rate >= f_rep {
        return None;
    }
    if rate == 0.0 {
        return Some(0.0);
    }
    let (mut lo, mut hi) = (0.0, mu_max);
    if pulsed_count_rate(f_rep, hi, model) < rate {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pulsed_count_rate(f_rep, mid, model) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}
