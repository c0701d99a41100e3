//! Diagnosis/reconstruction loss and the class-balanced, uncertainty-weighted
//! examination-selection loss.

use serde::{Deserialize, Serialize};

use crate::domain::NUM_EXAM_HEADS;
use crate::error::BackboneError;

pub const DIAGNOSIS_WEIGHT: f64 = 0.65;
pub const RECONSTRUCTION_WEIGHT: f64 = 0.35;

/// Mixing weights of the stage-one loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMix {
    pub diagnosis: f64,
    pub reconstruction: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        LossMix {
            diagnosis: DIAGNOSIS_WEIGHT,
            reconstruction: RECONSTRUCTION_WEIGHT,
        }
    }
}

/// Categorical cross-entropy; zero-weight terms are skipped so one-hot
/// targets never evaluate `0 * ln 0`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| -t * p.ln())
        .sum()
}

/// Mean squared logarithmic error between non-negative vectors.
pub fn msle(target: &[f64], reconstruction: &[f64]) -> Result<f64, BackboneError> {
    if target.len() != reconstruction.len() || target.is_empty() {
        return Err(BackboneError::Shape(format!(
            "msle over {} and {} values",
            target.len(),
            reconstruction.len()
        )));
    }
    let mut total = 0.0;
    for (t, r) in target.iter().zip(reconstruction) {
        if *t < 0.0 || *r < 0.0 {
            return Err(BackboneError::Domain(format!(
                "msle needs non-negative values, got target {t} and reconstruction {r}"
            )));
        }
        let d = t.ln_1p() - r.ln_1p();
        total += d * d;
    }
    Ok(total / target.len() as f64)
}

pub fn diagnosis_loss_with(
    mix: LossMix,
    class_probs: &[f64; 2],
    class_target: &[f64; 2],
    reconstruction: &[f64],
    pooled_input: &[f64],
) -> Result<f64, BackboneError> {
    let sum: f64 = class_probs.iter().sum();
    if class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(BackboneError::Domain(format!(
            "class probabilities {class_probs:?} are not on the simplex"
        )));
    }
    Ok(mix.diagnosis * cross_entropy(class_target, class_probs)
        + mix.reconstruction * msle(pooled_input, reconstruction)?)
}

/// `0.65 * CE(target, probs) + 0.35 * MSLE(pooled_input, reconstruction)`.
pub fn diagnosis_loss(
    class_probs: &[f64; 2],
    class_target: &[f64; 2],
    reconstruction: &[f64],
    pooled_input: &[f64],
) -> Result<f64, BackboneError> {
    diagnosis_loss_with(
        LossMix::default(),
        class_probs,
        class_target,
        reconstruction,
        pooled_input,
    )
}

/// Class-balance weights of one examination head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBalance {
    pub positives: u64,
    pub negatives: u64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
}

impl HeadBalance {
    /// `gamma_pos = (|P| + |N|) / (2|P|)`, `gamma_neg = (|P| + |N|) / (2|N|)`.
    pub fn from_counts(head: usize, positives: u64, negatives: u64) -> Result<Self, BackboneError> {
        if positives == 0 || negatives == 0 {
            return Err(BackboneError::DegenerateHead { head });
        }
        let total = (positives + negatives) as f64;
        Ok(HeadBalance {
            positives,
            negatives,
            gamma_pos: total / (2.0 * positives as f64),
            gamma_neg: total / (2.0 * negatives as f64),
        })
    }

    /// The weight of positive (`true`) or negative samples as an exact ratio
    /// `(|P| + |N|, 2|P|)` or `(|P| + |N|, 2|N|)`.
    pub fn weight_ratio(&self, positive: bool) -> (u64, u64) {
        let total = self.positives + self.negatives;
        if positive {
            (total, 2 * self.positives)
        } else {
            (total, 2 * self.negatives)
        }
    }
}

/// Balance weights for all heads from per-head counts. Degenerate heads are
/// `None` and excluded from the loss.
pub fn head_balances(counts: &[(u64, u64); NUM_EXAM_HEADS]) -> [Option<HeadBalance>; NUM_EXAM_HEADS] {
    let mut out = [None; NUM_EXAM_HEADS];
    for (head, (p, n)) in counts.iter().enumerate() {
        match HeadBalance::from_counts(head, *p, *n) {
            Ok(b) => out[head] = Some(b),
            Err(e) => tracing::warn!("{e}; head excluded from the selection loss"),
        }
    }
    out
}

/// Weighted binary log-likelihood of one head,
/// `gamma_pos * y * ln(s) + gamma_neg * (1 - y) * ln(1 - s)` (non-positive).
pub fn weighted_log_likelihood(balance: &HeadBalance, target: bool, score: f64) -> f64 {
    if target {
        balance.gamma_pos * score.ln()
    } else {
        balance.gamma_neg * (1.0 - score).ln()
    }
}

/// Uncertainty-weighted selection loss over the twelve heads for one sample:
/// `sum_i -(1 / (2 sigma_i^2)) * LL_i + ln sigma_i`, skipping excluded heads.
pub fn exam_selection_loss(
    exam_scores: &[f64; NUM_EXAM_HEADS],
    targets: &[bool; NUM_EXAM_HEADS],
    log_sigmas: &[f64; NUM_EXAM_HEADS],
    balances: &[Option<HeadBalance>; NUM_EXAM_HEADS],
) -> Result<f64, BackboneError> {
    let mut loss = 0.0;
    for head in 0..NUM_EXAM_HEADS {
        let Some(balance) = &balances[head] else {
            continue;
        };
        let s = exam_scores[head];
        if !(s > 0.0 && s < 1.0) {
            return Err(BackboneError::Domain(format!(
                "exam score {s} of head {head} is outside (0, 1)"
            )));
        }
        let inv_var = (-2.0 * log_sigmas[head]).exp();
        loss += -0.5 * inv_var * weighted_log_likelihood(balance, targets[head], s) + log_sigmas[head];
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let x = [0.2, 0.7, 0.0];
        let l = diagnosis_loss(&[1.0, 0.0], &[1.0, 0.0], &x, &x).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_probs_cost_ln2() {
        let x = [0.3, 0.4];
        let l = diagnosis_loss(&[0.5, 0.5], &[0.0, 1.0], &x, &x).unwrap();
        assert!((l - 0.65 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn negative_reconstruction_is_domain_error() {
        let err = diagnosis_loss(&[0.5, 0.5], &[1.0, 0.0], &[-0.1, 0.2], &[0.1, 0.2]).unwrap_err();
        assert!(matches!(err, BackboneError::Domain(_)));
    }

    #[test]
    fn balance_identity_and_symmetric_case() {
        let b = HeadBalance::from_counts(0, 37, 913).unwrap();
        assert_eq!(b.gamma_pos * 37.0 + b.gamma_neg * 913.0, 950.0);
        let b = HeadBalance::from_counts(0, 10, 10).unwrap();
        assert_eq!((b.gamma_pos, b.gamma_neg), (1.0, 1.0));
        assert!(matches!(
            HeadBalance::from_counts(3, 0, 10),
            Err(BackboneError::DegenerateHead { head: 3 })
        ));
    }

    #[test]
    fn single_head_closed_form() {
        // sigma = 1, y = 1, s = 0.5, |P| = |N|: -(1/2) ln 0.5 + 0
        let mut balances = [None; NUM_EXAM_HEADS];
        balances[0] = Some(HeadBalance::from_counts(0, 5, 5).unwrap());
        let mut scores = [0.9; NUM_EXAM_HEADS];
        scores[0] = 0.5;
        let mut targets = [false; NUM_EXAM_HEADS];
        targets[0] = true;
        let l = exam_selection_loss(&scores, &targets, &[0.0; NUM_EXAM_HEADS], &balances).unwrap();
        assert!((l - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }
}
