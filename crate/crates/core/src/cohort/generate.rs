//! Synthetic cohort generator.
//!
//! Blocks are Gaussian around 0.5 with a class-dependent shift along one
//! fixed random unit direction per category: AD sits at `+s/2` and CN at
//! `-s/2` noise standard deviations, so the per-block Mahalanobis gap between
//! the two class means is `s`. MCI and SMC sit at the midpoint with a tighter
//! spread. Indicator values are drawn per class against the indicator table
//! and written into the leading slots of the block that carries them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Cohort, ExamCategory, Label, Subject, VisitRecord, NUM_CATEGORIES};
use crate::error::CohortError;
use crate::indicators::{IndicatorRange, IndicatorTable};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ad: usize,
    pub cn: usize,
    pub mci: usize,
    pub smc: usize,
}

impl ClassCounts {
    pub fn uniform(n: usize) -> Self {
        ClassCounts {
            ad: n,
            cn: n,
            mci: n,
            smc: n,
        }
    }

    fn iter(&self) -> [(Label, usize); 4] {
        [
            (Label::AD, self.ad),
            (Label::CN, self.cn),
            (Label::MCI, self.mci),
            (Label::SMC, self.smc),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_subjects: ClassCounts,
    pub width: usize,
    /// Mahalanobis gap between the AD and CN block means, per block.
    pub separation: f64,
    /// Per-coordinate noise standard deviation of known-class blocks.
    pub noise: f64,
    /// Noise scale of MCI/SMC blocks relative to `noise`.
    pub unknown_spread: f64,
    /// Drop probability for categories without an explicit entry.
    pub default_missingness: f64,
    pub missingness: BTreeMap<ExamCategory, f64>,
    pub max_visits: u32,
    /// Probability that an AD (CN) indicator falls inside the AD (CN) range.
    pub indicator_in_range: f64,
    /// Probability that an MCI/SMC indicator lands between the class ranges.
    pub unknown_intermediate: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let missingness = [
            (ExamCategory::Cog, 0.05),
            (ExamCategory::CE, 0.2),
            (ExamCategory::Neur, 0.3),
            (ExamCategory::FB, 0.3),
            (ExamCategory::PE, 0.3),
        ]
        .into_iter()
        .collect();
        CohortConfig {
            n_subjects: ClassCounts::uniform(100),
            width: 32,
            separation: 3.0,
            noise: 0.1,
            unknown_spread: 0.4,
            default_missingness: 0.5,
            missingness,
            max_visits: 3,
            indicator_in_range: 0.93,
            unknown_intermediate: 0.7,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(CohortError::Config(format!("{name} = {p} is not in [0,1]")))
            }
        };
        prob("default_missingness", self.default_missingness)?;
        for (c, p) in &self.missingness {
            prob(&format!("missingness[{c}]"), *p)?;
        }
        prob("indicator_in_range", self.indicator_in_range)?;
        prob("unknown_intermediate", self.unknown_intermediate)?;
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(CohortError::Config("separation must be >= 0".into()));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(CohortError::Config("noise must be > 0".into()));
        }
        if !(self.unknown_spread > 0.0 && self.unknown_spread.is_finite()) {
            return Err(CohortError::Config("unknown_spread must be > 0".into()));
        }
        if self.width == 0 {
            return Err(CohortError::Config("width must be >= 1".into()));
        }
        if self.max_visits == 0 {
            return Err(CohortError::Config("max_visits must be >= 1".into()));
        }
        Ok(())
    }

    pub fn missingness_of(&self, category: ExamCategory) -> f64 {
        if category == ExamCategory::Base {
            return 0.0;
        }
        self.missingness
            .get(&category)
            .copied()
            .unwrap_or(self.default_missingness)
    }
}

#[derive(Debug, Clone, Copy)]
enum Draw {
    InsideAd,
    InsideCn,
    Between,
    OutsideAd,
    OutsideCn,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn above_envelope(rng: &mut ChaCha8Rng, range: &IndicatorRange) -> f64 {
    let (lo, hi) = range.envelope();
    let span = (hi - lo).max(1.0);
    hi + uniform(rng, 0.05 * span, 0.5 * span)
}

/// Samples uniformly from `[lo, hi]` minus `exclude`, by rejection. Falls
/// back to the plain interval when the difference has no usable mass.
fn sample_excluding(
    rng: &mut ChaCha8Rng,
    (lo, hi): (f64, f64),
    exclude: impl Fn(f64) -> bool,
) -> Option<f64> {
    for _ in 0..64 {
        let v = uniform(rng, lo, hi);
        if !exclude(v) {
            return Some(v);
        }
    }
    None
}

fn draw_indicator(rng: &mut ChaCha8Rng, range: &IndicatorRange, draw: Draw) -> f64 {
    let ad = (range.ad_low, range.ad_high);
    let cn = (range.cn_low, range.cn_high);
    let inside_ad = |v: f64| !range.outside_ad(v);
    let inside_cn = |v: f64| !range.outside_cn(v);
    match draw {
        Draw::InsideAd => sample_excluding(rng, ad, inside_cn).unwrap_or_else(|| uniform(rng, ad.0, ad.1)),
        Draw::InsideCn => sample_excluding(rng, cn, inside_ad).unwrap_or_else(|| uniform(rng, cn.0, cn.1)),
        Draw::OutsideAd => sample_excluding(rng, cn, inside_ad).unwrap_or_else(|| above_envelope(rng, range)),
        Draw::OutsideCn => sample_excluding(rng, ad, inside_cn).unwrap_or_else(|| above_envelope(rng, range)),
        Draw::Between => {
            let lo = ad.0.max(cn.0);
            let hi = ad.1.min(cn.1);
            if lo <= hi {
                // overlapping ranges: inside both
                uniform(rng, lo, hi)
            } else {
                // disjoint ranges: the open gap between them
                let v = uniform(rng, hi, lo);
                if v == hi || v == lo {
                    0.5 * (hi + lo)
                } else {
                    v
                }
            }
        }
    }
}

fn shared_range(range: &IndicatorRange) -> bool {
    range.ad_low == range.cn_low && range.ad_high == range.cn_high
}

fn choose_draw(rng: &mut ChaCha8Rng, label: Label, range: &IndicatorRange, cfg: &CohortConfig) -> Draw {
    let u: f64 = rng.gen();
    if shared_range(range) {
        let inside = match label {
            Label::AD | Label::CN | Label::Unlabeled => u < cfg.indicator_in_range,
            Label::MCI | Label::SMC => u < cfg.unknown_intermediate,
        };
        return if inside { Draw::Between } else { Draw::OutsideAd };
    }
    match label {
        Label::AD | Label::Unlabeled => {
            if u < cfg.indicator_in_range {
                Draw::InsideAd
            } else {
                Draw::OutsideAd
            }
        }
        Label::CN => {
            if u < cfg.indicator_in_range {
                Draw::InsideCn
            } else {
                Draw::OutsideCn
            }
        }
        Label::MCI | Label::SMC => {
            let rest = 1.0 - cfg.unknown_intermediate;
            let ad_share = if label == Label::MCI { 2.0 / 3.0 } else { 1.0 / 3.0 };
            if u < cfg.unknown_intermediate {
                Draw::Between
            } else if u < cfg.unknown_intermediate + rest * ad_share {
                Draw::InsideAd
            } else {
                Draw::InsideCn
            }
        }
    }
}

fn class_shift(label: Label) -> f64 {
    match label {
        Label::AD => 1.0,
        Label::CN => -1.0,
        _ => 0.0,
    }
}

fn unit_directions(rng: &mut ChaCha8Rng, width: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..NUM_CATEGORIES)
        .map(|_| {
            let mut v: Vec<f64> = (0..width).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Generates a synthetic cohort. Deterministic for a fixed config.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort, CohortError> {
    config.validate()?;
    generate_with_table(config, &IndicatorTable::default())
}

pub fn generate_with_table(
    config: &CohortConfig,
    table: &IndicatorTable,
) -> Result<Cohort, CohortError> {
    config.validate()?;
    let width = config.width;
    let directions = unit_directions(&mut seed::stream_rng(config.seed, 0), width);
    let mut rng = seed::stream_rng(config.seed, 1);
    let known_noise = Normal::new(0.0, config.noise).expect("validated noise");
    let unknown_noise =
        Normal::new(0.0, config.noise * config.unknown_spread).expect("validated spread");

    let mut subjects = Vec::new();
    let mut counter = 0usize;
    for (label, n) in config.n_subjects.iter() {
        for _ in 0..n {
            counter += 1;
            let id = format!("S{counter:05}");
            let n_visits = rng.gen_range(1..=config.max_visits);
            let mut visits = Vec::with_capacity(n_visits as usize);
            for visit_index in 0..n_visits {
                let mut blocks = BTreeMap::new();
                let mut indicators = BTreeMap::new();
                for category in ExamCategory::ALL {
                    let drop = rng.gen::<f64>() < config.missingness_of(category);
                    if drop {
                        continue;
                    }
                    let offset = class_shift(label) * config.separation * config.noise / 2.0;
                    let noise = if label.known_class().is_some() {
                        &known_noise
                    } else {
                        &unknown_noise
                    };
                    let dir = &directions[category.index()];
                    let mut block: Vec<f64> = dir
                        .iter()
                        .map(|d| (0.5 + offset * d + noise.sample(&mut rng)).clamp(0.0, 1.0))
                        .collect();
                    for (slot, range) in table.for_category(category).enumerate() {
                        let draw = choose_draw(&mut rng, label, range, config);
                        let value = draw_indicator(&mut rng, range, draw);
                        indicators.insert(range.name.clone(), value);
                        if slot < width {
                            block[slot] = range.normalize(value);
                        }
                    }
                    blocks.insert(category, block);
                }
                visits.push(VisitRecord {
                    subject_id: id.clone(),
                    visit_index,
                    label,
                    blocks,
                    indicators,
                });
            }
            subjects.push(Subject { id, visits });
        }
    }
    Ok(Cohort::new(width, subjects)?)
}
