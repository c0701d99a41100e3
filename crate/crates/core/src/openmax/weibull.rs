//! Shifted two-parameter Weibull tails fitted by maximum likelihood.

use serde::{Deserialize, Serialize};

use crate::error::OpenMaxError;

/// Relative margin placed below the smallest tail value when choosing the shift.
pub const SHIFT_MARGIN: f64 = 1e-3;
pub const MIN_DISTINCT: usize = 5;
const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullTail {
    pub tau: f64,
    pub lambda: f64,
    pub kappa: f64,
}

impl WeibullTail {
    /// CDF of the shifted Weibull; zero at and below `tau`.
    pub fn w_score(&self, d: f64) -> f64 {
        let z = (d - self.tau).max(0.0) / self.lambda;
        if z == 0.0 {
            return 0.0;
        }
        -(-z.powf(self.kappa)).exp_m1()
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        weibull_log_likelihood(samples, self.tau, self.lambda, self.kappa)
    }
}

pub fn weibull_log_likelihood(samples: &[f64], tau: f64, lambda: f64, kappa: f64) -> f64 {
    samples
        .iter()
        .map(|x| {
            let y = (x - tau) / lambda;
            if y <= 0.0 {
                return f64::NEG_INFINITY;
            }
            kappa.ln() - lambda.ln() + (kappa - 1.0) * y.ln() - y.powf(kappa)
        })
        .sum()
}

fn count_distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Profile score `sum(y^k ln y)/sum(y^k) - 1/k - mean(ln y)` and its derivative.
/// `y` must be positive and scaled so its maximum is 1.
fn profile(y: &[f64], logs: &[f64], mean_log: f64, kappa: f64) -> (f64, f64) {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (v, l) in y.iter().zip(logs) {
        let p = v.powf(kappa);
        s0 += p;
        s1 += p * l;
        s2 += p * l * l;
    }
    let g = s1 / s0 - 1.0 / kappa - mean_log;
    let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (kappa * kappa);
    (g, dg)
}

/// MLE of `(lambda, kappa)` for strictly positive samples (no shift).
pub fn fit_weibull_mle(samples: &[f64]) -> Result<(f64, f64), OpenMaxError> {
    if samples.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(OpenMaxError::InvalidParameter(
            "Weibull samples must be positive and finite".into(),
        ));
    }
    let distinct = count_distinct(samples);
    if distinct < 2 {
        return Err(OpenMaxError::InsufficientTail {
            distinct,
            needed: 2,
        });
    }
    let scale = samples.iter().copied().fold(0.0, f64::max);
    let y: Vec<f64> = samples.iter().map(|v| v / scale).collect();
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / logs.len() as f64;

    // g is increasing in kappa with g(0+) < 0; bracket the root first.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while profile(&y, &logs, mean_log, hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(OpenMaxError::FitDiverged);
        }
    }
    let mut kappa = if lo > 0.0 { 0.5 * (lo + hi) } else { hi };
    for _ in 0..MAX_ITERATIONS {
        let (g, dg) = profile(&y, &logs, mean_log, kappa);
        if !g.is_finite() || !dg.is_finite() {
            return Err(OpenMaxError::FitDiverged);
        }
        if g < 0.0 {
            lo = kappa;
        } else {
            hi = kappa;
        }
        let mut next = kappa - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let converged = ((next - kappa) / kappa).abs() < TOLERANCE;
        kappa = next;
        if converged {
            let mean_pow = y.iter().map(|v| v.powf(kappa)).sum::<f64>() / y.len() as f64;
            let lambda = scale * mean_pow.powf(1.0 / kappa);
            return Ok((lambda, kappa));
        }
    }
    Err(OpenMaxError::FitDiverged)
}

/// Fits the upper tail: the `tail_size` largest distances, shifted to start
/// just above zero.
pub fn weibull_fit_high(distances: &[f64], tail_size: usize) -> Result<WeibullTail, OpenMaxError> {
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(OpenMaxError::InvalidParameter("non-finite distance".into()));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(tail_size.min(sorted.len()));
    let distinct = count_distinct(&sorted);
    if distinct < MIN_DISTINCT {
        return Err(OpenMaxError::InsufficientTail {
            distinct,
            needed: MIN_DISTINCT,
        });
    }
    let max = sorted[0];
    let min = sorted[sorted.len() - 1];
    let tau = min - SHIFT_MARGIN * (max - min);
    let shifted: Vec<f64> = sorted.iter().map(|d| d - tau).collect();
    let (lambda, kappa) = fit_weibull_mle(&shifted)?;
    Ok(WeibullTail { tau, lambda, kappa })
}

/// Default tail: the upper half of the distances.
pub fn default_tail_size(n: usize) -> usize {
    n.div_ceil(2)
}
