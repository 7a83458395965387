//! Least-squares fits of the pulsed count-rate model.
//!
//! Both fits minimize squared rate residuals of
//! `f_rep * (1 - exp(-mu * eta(mu)))` with a small bounded
//! Levenberg-Marquardt solver. Residuals are scaled by `1 / f_rep` internally.

use std::fmt;

use serde::Serialize;

use super::{efficiency_at, pulsed_count_rate, EfficiencyModel};

pub const MAX_ITERATIONS: usize = 500;
pub const STEP_TOLERANCE: f64 = 1e-10;

/// Fits of constant efficiency use only points at or below this count rate by default.
pub const DEFAULT_RATE_CUTOFF: f64 = 3e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    /// Mean photon number per pulse.
    pub mu: f64,
    /// Registered count rate, Hz.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    /// Root of the summed squared rate residuals, Hz.
    pub residual_norm: f64,
    pub damping: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitError {
    TooFewPoints {
        needed: usize,
        got: usize,
    },
    InsufficientSpan {
        ratio: f64,
    },
    InvalidInput(String),
    NoConvergence {
        best: Vec<f64>,
        diagnostics: FitDiagnostics,
    },
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::TooFewPoints { needed, got } => {
                write!(f, "need at least {needed} usable points, got {got}")
            }
            FitError::InsufficientSpan { ratio } => {
                write!(
                    f,
                    "points span a mu ratio of {ratio:.3}, need at least one decade"
                )
            }
            FitError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            FitError::NoConvergence { best, diagnostics } => write!(
                f,
                "no convergence after {} iterations (best {:?}, residual {:.4e})",
                diagnostics.iterations, best, diagnostics.residual_norm
            ),
        }
    }
}

impl std::error::Error for FitError {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantEfficiencyFit {
    pub eta: f64,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyModelFit {
    pub model: EfficiencyModel,
    pub residual_norm: f64,
    /// The exponential term is not constrained by the data (p1 ~ 0, p2 ~ 0,
    /// or the decay is over before the first point).
    pub degenerate: bool,
    pub diagnostics: FitDiagnostics,
}

/// Outcome of [`levenberg_marquardt`].
struct LmOutcome {
    params: Vec<f64>,
    cost: f64,
    iterations: usize,
    damping: f64,
    converged: bool,
}

/// Bounded Levenberg-Marquardt for a handful of parameters.
///
/// `residuals(x, r)` fills `r`, `jacobian(x, j)` fills the row-major
/// `m x n` Jacobian and `project` clamps a trial point back into the feasible set.
fn levenberg_marquardt(
    x0: &[f64],
    m: usize,
    residuals: &dyn Fn(&[f64], &mut [f64]),
    jacobian: &dyn Fn(&[f64], &mut [f64]),
    project: &dyn Fn(&mut [f64]),
) -> LmOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x);
    let mut r = vec![0.0; m];
    let mut j = vec![0.0; m * n];
    residuals(&x, &mut r);
    let mut cost = r.iter().map(|v| v * v).sum::<f64>();
    let mut lambda = 1e-3;
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];

    for iter in 1..=MAX_ITERATIONS {
        jacobian(&x, &mut j);
        let mut jtj = vec![0.0; n * n];
        let mut jtr = vec![0.0; n];
        for row in 0..m {
            let jr = &j[row * n..(row + 1) * n];
            for a in 0..n {
                jtr[a] += jr[a] * r[row];
                for b in 0..n {
                    jtj[a * n + b] += jr[a] * jr[b];
                }
            }
        }
        if cost == 0.0 || jtr.iter().all(|g| *g == 0.0) {
            return LmOutcome {
                params: x,
                cost,
                iterations: iter,
                damping: lambda,
                converged: true,
            };
        }

        // Inner loop: raise damping until a step lowers the cost or becomes negligible.
        loop {
            let mut a = jtj.clone();
            for d in 0..n {
                a[d * n + d] += lambda * jtj[d * n + d].max(1e-300);
            }
            let rhs: Vec<f64> = jtr.iter().map(|g| -g).collect();
            let step = match solve_dense(&a, &rhs, n) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    if lambda > 1e30 {
                        return LmOutcome {
                            params: x,
                            cost,
                            iterations: iter,
                            damping: lambda,
                            converged: false,
                        };
                    }
                    continue;
                }
            };
            for d in 0..n {
                trial[d] = x[d] + step[d];
            }
            project(&mut trial);
            let step_norm = trial
                .iter()
                .zip(&x)
                .map(|(t, v)| (t - v).powi(2))
                .sum::<f64>()
                .sqrt();
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= STEP_TOLERANCE * (x_norm + STEP_TOLERANCE) {
                return LmOutcome {
                    params: x,
                    cost,
                    iterations: iter,
                    damping: lambda,
                    converged: true,
                };
            }
            residuals(&trial, &mut r_trial);
            let trial_cost = r_trial.iter().map(|v| v * v).sum::<f64>();
            if trial_cost < cost {
                x.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e30 {
                return LmOutcome {
                    params: x,
                    cost,
                    iterations: iter,
                    damping: lambda,
                    converged: true,
                };
            }
        }
    }
    LmOutcome {
        params: x,
        cost,
        iterations: MAX_ITERATIONS,
        damping: lambda,
        converged: false,
    }
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&p, &q| m[p * n + col].abs().total_cmp(&m[q * n + col].abs()))?;
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            x.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = m[row * n + col] / m[col * n + col];
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn check_points(points: &[RatePoint], f_rep: f64) -> Result<(), FitError> {
    if !(f_rep > 0.0) {
        return Err(FitError::InvalidInput(format!(
            "repetition rate {f_rep} must be > 0"
        )));
    }
    for p in points {
        if !(p.mu >= 0.0) || !p.rate.is_finite() || !p.mu.is_finite() {
            return Err(FitError::InvalidInput(format!("bad point {p:?}")));
        }
    }
    Ok(())
}

/// Fit a constant efficiency to the points whose rate is at most `rate_cutoff`.
pub fn fit_constant_efficiency(
    points: &[RatePoint],
    f_rep: f64,
    rate_cutoff: f64,
) -> Result<ConstantEfficiencyFit, FitError> {
    check_points(points, f_rep)?;
    let used: Vec<RatePoint> = points
        .iter()
        .copied()
        .filter(|p| p.rate <= rate_cutoff && p.mu > 0.0)
        .collect();
    if used.len() < 2 {
        return Err(FitError::TooFewPoints {
            needed: 2,
            got: used.len(),
        });
    }

    // Linearized starting point: eta ~ -ln(1 - R/f) / mu.
    let guesses: Vec<f64> = used
        .iter()
        .filter(|p| p.rate > 0.0 && p.rate < f_rep)
        .map(|p| -(-p.rate / f_rep).ln_1p() / p.mu)
        .collect();
    let start = if guesses.is_empty() {
        0.1
    } else {
        (guesses.iter().sum::<f64>() / guesses.len() as f64).clamp(1e-6, 1.0)
    };

    let residuals = |x: &[f64], r: &mut [f64]| {
        for (ri, p) in r.iter_mut().zip(&used) {
            *ri = -(-p.mu * x[0]).exp_m1() - p.rate / f_rep;
        }
    };
    let jacobian = |x: &[f64], j: &mut [f64]| {
        for (ji, p) in j.iter_mut().zip(&used) {
            *ji = p.mu * (-p.mu * x[0]).exp();
        }
    };
    let project = |x: &mut [f64]| x[0] = x[0].clamp(1e-12, 1.0);

    let out = levenberg_marquardt(&[start], used.len(), &residuals, &jacobian, &project);
    let diagnostics = FitDiagnostics {
        iterations: out.iterations,
        residual_norm: out.cost.sqrt() * f_rep,
        damping: out.damping,
        points_used: used.len(),
    };
    if !out.converged {
        return Err(FitError::NoConvergence {
            best: out.params,
            diagnostics,
        });
    }
    Ok(ConstantEfficiencyFit {
        eta: out.params[0],
        diagnostics,
    })
}

/// Fit `eta(mu) = p1 exp(-p2 mu) + p3` to pulsed count rates.
pub fn fit_efficiency_model(
    points: &[RatePoint],
    f_rep: f64,
    initial: (f64, f64, f64),
) -> Result<EfficiencyModelFit, FitError> {
    check_points(points, f_rep)?;
    if points.len() < 4 {
        return Err(FitError::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let positive = points.iter().map(|p| p.mu).filter(|&m| m > 0.0);
    let mu_min = positive.clone().fold(f64::INFINITY, f64::min);
    let mu_max = positive.fold(0.0, f64::max);
    let ratio = if mu_min.is_finite() {
        mu_max / mu_min
    } else {
        0.0
    };
    if !(ratio >= 10.0) {
        return Err(FitError::InsufficientSpan { ratio });
    }

    let residuals = |x: &[f64], r: &mut [f64]| {
        let model = EfficiencyModel::Exponential {
            p1: x[0],
            p2: x[1],
            p3: x[2],
        };
        for (ri, p) in r.iter_mut().zip(points) {
            *ri = pulsed_count_rate(1.0, p.mu, &model) - p.rate / f_rep;
        }
    };
    let jacobian = |x: &[f64], j: &mut [f64]| {
        let (p1, p2, p3) = (x[0], x[1], x[2]);
        for (row, p) in points.iter().enumerate() {
            let decay = (-p2 * p.mu).exp();
            let eta = p1 * decay + p3;
            let d_eta = p.mu * (-p.mu * eta).exp();
            j[row * 3] = d_eta * decay;
            j[row * 3 + 1] = -d_eta * p1 * p.mu * decay;
            j[row * 3 + 2] = d_eta;
        }
    };
    let project = |x: &mut [f64]| {
        x[0] = x[0].clamp(0.0, 1.0);
        x[1] = x[1].clamp(0.0, 1e3);
        x[2] = x[2].clamp(0.0, 1.0);
        let sum = x[0] + x[2];
        if sum > 1.0 {
            x[0] /= sum;
            x[2] /= sum;
        }
    };

    let x0 = [initial.0, initial.1, initial.2];
    let out = levenberg_marquardt(&x0, points.len(), &residuals, &jacobian, &project);
    let diagnostics = FitDiagnostics {
        iterations: out.iterations,
        residual_norm: out.cost.sqrt() * f_rep,
        damping: out.damping,
        points_used: points.len(),
    };
    if !out.converged {
        return Err(FitError::NoConvergence {
            best: out.params,
            diagnostics,
        });
    }
    let (p1, p2, p3) = (out.params[0], out.params[1], out.params[2]);
    if !(p1 + p3 > 0.0) {
        return Err(FitError::NoConvergence {
            best: out.params,
            diagnostics,
        });
    }
    let model = EfficiencyModel::Exponential { p1, p2, p3 };

    let eta_lo = efficiency_at(&model, mu_max);
    let eta_hi = efficiency_at(&model, mu_min);
    let swing = (eta_hi - eta_lo).abs();
    let degenerate = p1 <= 1e-6 || p2 * mu_max <= 1e-6 || swing <= 1e-3 * eta_hi.max(1e-300);

    Ok(EfficiencyModelFit {
        model,
        residual_norm: diagnostics.residual_norm,
        degenerate,
        diagnostics,
    })
}
