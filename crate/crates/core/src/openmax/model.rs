//! Fitting and scoring of the abnormal-pattern OpenMax model.

use serde::{Deserialize, Serialize};

use super::kmeans::minibatch_kmeans;
use super::pattern::{pattern_distance, AbnormalPattern};
use super::weibull::{weibull_fit_high, WeibullTail};
use crate::domain::KnownClass;
use crate::error::OpenMaxError;
use crate::seed;

pub const DEFAULT_CENTERS: usize = 3;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const DEFAULT_ALPHA: usize = 2;
pub const MIN_CLASS_PATTERNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenMaxConfig {
    /// Centers per class, indexed AD, CN.
    pub centers: [usize; 2],
    /// Threshold quantile per class, indexed AD, CN.
    pub quantiles: [f64; 2],
    pub alpha: usize,
    pub abnormal_flag: bool,
    /// Fraction of the largest distances used for the tail fit.
    pub tail_fraction: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for OpenMaxConfig {
    fn default() -> Self {
        OpenMaxConfig {
            centers: [DEFAULT_CENTERS; 2],
            quantiles: [DEFAULT_QUANTILE; 2],
            alpha: DEFAULT_ALPHA,
            abnormal_flag: true,
            tail_fraction: 0.5,
            batch_size: 64,
            iterations: 100,
            seed: 0,
        }
    }
}

impl OpenMaxConfig {
    pub fn validate(&self) -> Result<(), OpenMaxError> {
        if !(1..=2).contains(&self.alpha) {
            return Err(OpenMaxError::InvalidParameter(format!(
                "alpha must be 1 or 2, got {}",
                self.alpha
            )));
        }
        if self.centers.contains(&0) {
            return Err(OpenMaxError::InvalidParameter("center counts must be >= 1".into()));
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
            return Err(OpenMaxError::InvalidParameter("quantiles must lie in (0, 1]".into()));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(OpenMaxError::InvalidParameter("tail_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub centers: Vec<Vec<f64>>,
    pub tail: WeibullTail,
    pub threshold: f64,
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxModel {
    pub ad: ClassCalibration,
    pub cn: ClassCalibration,
    pub alpha: usize,
    pub abnormal_flag: bool,
    pub seed: u64,
}

/// Everything computed while scoring one pattern; probabilities are ordered
/// (Unknown, AD, CN), per-class arrays (AD, CN).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxScore {
    pub probs: [f64; 3],
    pub distances: [f64; 2],
    pub w_scores: [f64; 2],
    pub weights: [f64; 2],
    pub abnormal: [f64; 2],
}

/// Nearest-rank quantile: the smallest value with at least `q` of the data at
/// or below it.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn softmax3(v: [f64; 3]) -> [f64; 3] {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

/// Rank weights `omega` from activations and per-class w-scores.
pub fn rank_weights(activations: [f64; 2], w_scores: [f64; 2], alpha: usize) -> [f64; 2] {
    let mut order = [0usize, 1];
    order.sort_by(|a, b| activations[*b].total_cmp(&activations[*a]));
    let mut omega = [1.0; 2];
    for (r0, &c) in order.iter().enumerate().take(alpha) {
        let r = r0 + 1;
        omega[c] = 1.0 - ((alpha - r) as f64 / alpha as f64) * w_scores[c];
    }
    omega
}

/// Softmax over `(sum v_c (1 - omega_c), v_AD omega_AD, v_CN omega_CN)`.
pub fn revised_probabilities(activations: [f64; 2], omega: [f64; 2]) -> [f64; 3] {
    let unknown: f64 = (0..2).map(|c| activations[c] * (1.0 - omega[c])).sum();
    softmax3([unknown, activations[0] * omega[0], activations[1] * omega[1]])
}

/// Shrinks each known-class probability by its abnormal score and gives the
/// removed mass to Unknown.
pub fn apply_abnormal_scores(probs: [f64; 3], abnormal: [f64; 2]) -> [f64; 3] {
    let ad = probs[1] * (1.0 - abnormal[0]);
    let cn = probs[2] * (1.0 - abnormal[1]);
    [(1.0 - ad - cn).max(0.0), ad, cn]
}

pub fn abnormal_score(distance: f64, threshold: f64) -> f64 {
    if distance <= threshold {
        0.0
    } else if threshold <= 0.0 {
        1.0
    } else {
        ((distance - threshold) / threshold).clamp(0.0, 1.0)
    }
}

fn fit_class(
    own: &[AbnormalPattern],
    own_centers: &[Vec<f64>],
    other_centers: &[Vec<f64>],
    quantile: f64,
    tail_fraction: f64,
) -> Result<ClassCalibration, OpenMaxError> {
    let distances = own
        .iter()
        .map(|p| pattern_distance(p.as_slice(), own_centers, other_centers))
        .collect::<Result<Vec<_>, _>>()?;
    let tail_size = ((distances.len() as f64 * tail_fraction).ceil() as usize).max(1);
    let tail = weibull_fit_high(&distances, tail_size)?;
    Ok(ClassCalibration {
        centers: own_centers.to_vec(),
        tail,
        threshold: nearest_rank_quantile(&distances, quantile),
        quantile,
    })
}

/// `patterns` holds correctly classified training patterns, indexed AD, CN.
pub fn fit_openmax(
    patterns: [&[AbnormalPattern]; 2],
    config: &OpenMaxConfig,
) -> Result<OpenMaxModel, OpenMaxError> {
    config.validate()?;
    let mut centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
    for class in KnownClass::ALL {
        let c = class.index();
        let needed = config.centers[c].max(MIN_CLASS_PATTERNS);
        if patterns[c].len() < needed {
            return Err(OpenMaxError::TooFewPoints {
                needed,
                got: patterns[c].len(),
            });
        }
        let points: Vec<Vec<f64>> = patterns[c].iter().map(|p| p.0.clone()).collect();
        let fit = minibatch_kmeans(
            &points,
            config.centers[c],
            config.batch_size,
            config.iterations,
            seed::derive_seed(config.seed, c as u64),
        )?;
        centers.push(fit.centers);
    }
    let ad = fit_class(
        patterns[0],
        &centers[0],
        &centers[1],
        config.quantiles[0],
        config.tail_fraction,
    )?;
    let cn = fit_class(
        patterns[1],
        &centers[1],
        &centers[0],
        config.quantiles[1],
        config.tail_fraction,
    )?;
    Ok(OpenMaxModel {
        ad,
        cn,
        alpha: config.alpha,
        abnormal_flag: config.abnormal_flag,
        seed: config.seed,
    })
}

impl OpenMaxModel {
    pub fn class(&self, class: KnownClass) -> &ClassCalibration {
        match class {
            KnownClass::AD => &self.ad,
            KnownClass::CN => &self.cn,
        }
    }

    pub fn distances(&self, x: &AbnormalPattern) -> Result<[f64; 2], OpenMaxError> {
        Ok([
            pattern_distance(x.as_slice(), &self.ad.centers, &self.cn.centers)?,
            pattern_distance(x.as_slice(), &self.cn.centers, &self.ad.centers)?,
        ])
    }

    pub fn score(&self, x: &AbnormalPattern, activations: [f64; 2]) -> Result<OpenMaxScore, OpenMaxError> {
        if !(1..=2).contains(&self.alpha) {
            return Err(OpenMaxError::InvalidParameter(format!("alpha {}", self.alpha)));
        }
        let distances = self.distances(x)?;
        let w_scores = [
            self.ad.tail.w_score(distances[0]),
            self.cn.tail.w_score(distances[1]),
        ];
        let weights = rank_weights(activations, w_scores, self.alpha);
        let mut probs = revised_probabilities(activations, weights);
        let mut abnormal = [0.0; 2];
        if self.abnormal_flag {
            abnormal = [
                abnormal_score(distances[0], self.ad.threshold),
                abnormal_score(distances[1], self.cn.threshold),
            ];
            probs = apply_abnormal_scores(probs, abnormal);
        }
        Ok(OpenMaxScore {
            probs,
            distances,
            w_scores,
            weights,
            abnormal,
        })
    }
}

/// Probabilities over (Unknown, AD, CN).
pub fn openmax_probs(
    x: &AbnormalPattern,
    activations: [f64; 2],
    model: &OpenMaxModel,
) -> Result<[f64; 3], OpenMaxError> {
    Ok(model.score(x, activations)?.probs)
}
