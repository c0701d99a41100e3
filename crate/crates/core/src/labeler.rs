//! Next-examination targets from the prediction gain between nested
//! strategies of the same visit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::ExamHeadTarget;
use crate::domain::{KnownClass, StrategyMask, NUM_EXAM_HEADS};
use crate::error::LabelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyPrediction {
    pub mask: StrategyMask,
    pub y_true: KnownClass,
    pub y_pred: [f64; 2],
}

/// `sum(t * p_j - t * p_i) + sum(!t * p_i - !t * p_j)` for one-hot `t`.
pub fn prediction_gain(y_true: KnownClass, pred_i: [f64; 2], pred_j: [f64; 2]) -> f64 {
    let t = y_true.one_hot();
    (0..2)
        .map(|k| t[k] * (pred_j[k] - pred_i[k]) + (1.0 - t[k]) * (pred_i[k] - pred_j[k]))
        .sum()
}

/// Target per strategy: the heads of every category that an improving
/// superset adds. Strategies without an improving superset get all zeros.
pub fn label_next_examinations(
    strategies: &[StrategyPrediction],
) -> Result<BTreeMap<StrategyMask, ExamHeadTarget>, LabelError> {
    let mut seen = BTreeSet::new();
    for s in strategies {
        if !seen.insert(s.mask) {
            return Err(LabelError::DuplicateStrategy(format!("{:?}", s.mask)));
        }
    }
    if let Some(first) = strategies.first() {
        if strategies.iter().any(|s| s.y_true != first.y_true) {
            return Err(LabelError::MixedTargets);
        }
    }
    let mut sorted: Vec<&StrategyPrediction> = strategies.iter().collect();
    sorted.sort_by_key(|s| (s.mask.len(), s.mask));

    let mut out = BTreeMap::new();
    for (a, si) in sorted.iter().enumerate() {
        let mut target = [false; NUM_EXAM_HEADS];
        for sj in &sorted[a + 1..] {
            if !si.mask.is_proper_subset(sj.mask) {
                continue;
            }
            if prediction_gain(si.y_true, si.y_pred, sj.y_pred) > 0.0 {
                for category in sj.mask.set().difference(si.mask.set()).iter() {
                    if let Some(h) = category.head_index() {
                        target[h] = true;
                    }
                }
            }
        }
        out.insert(si.mask, target);
    }
    Ok(out)
}

/// One line of the labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamLabelRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub mask: StrategyMask,
    pub targets: Vec<u8>,
}

impl ExamLabelRecord {
    pub fn new(subject_id: &str, visit_index: u32, mask: StrategyMask, target: &ExamHeadTarget) -> Self {
        ExamLabelRecord {
            subject_id: subject_id.to_string(),
            visit_index,
            mask,
            targets: target.iter().map(|b| u8::from(*b)).collect(),
        }
    }

    pub fn target(&self) -> Option<ExamHeadTarget> {
        let mut t = [false; NUM_EXAM_HEADS];
        if self.targets.len() != NUM_EXAM_HEADS {
            return None;
        }
        for (slot, v) in t.iter_mut().zip(&self.targets) {
            *slot = *v != 0;
        }
        Some(t)
    }
}

pub fn write_labels<W: Write>(mut out: W, records: &[ExamLabelRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels(text: &str) -> Result<Vec<ExamLabelRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExamCategory::*;

    fn mask(c: &[crate::domain::ExamCategory]) -> StrategyMask {
        StrategyMask::from_categories(c.iter().copied()).unwrap()
    }

    #[test]
    fn substitution_example() {
        let i = StrategyPrediction {
            mask: mask(&[Base, Cog]),
            y_true: KnownClass::AD,
            y_pred: [0.6, 0.4],
        };
        let j = StrategyPrediction {
            mask: mask(&[Base, Cog, CE]),
            y_true: KnownClass::AD,
            y_pred: [0.8, 0.2],
        };
        assert!((prediction_gain(KnownClass::AD, i.y_pred, j.y_pred) - 0.4).abs() < 1e-12);
        let out = label_next_examinations(&[j, i]).unwrap();
        let t = out[&i.mask];
        assert!(t[CE.head_index().unwrap()]);
        assert_eq!(t.iter().filter(|b| **b).count(), 1);
        assert_eq!(out[&j.mask], [false; NUM_EXAM_HEADS]);
    }

    #[test]
    fn equal_predictions_do_not_label() {
        let p = [0.7, 0.3];
        let i = StrategyPrediction { mask: mask(&[Base]), y_true: KnownClass::CN, y_pred: p };
        let j = StrategyPrediction { mask: mask(&[Base, MRI]), y_true: KnownClass::CN, y_pred: p };
        let out = label_next_examinations(&[i, j]).unwrap();
        assert_eq!(out[&i.mask], [false; NUM_EXAM_HEADS]);
    }

    #[test]
    fn duplicates_and_mixed_targets() {
        let i = StrategyPrediction { mask: mask(&[Base]), y_true: KnownClass::CN, y_pred: [0.5, 0.5] };
        assert!(matches!(
            label_next_examinations(&[i, i]),
            Err(LabelError::DuplicateStrategy(_))
        ));
        let j = StrategyPrediction { mask: mask(&[Base, Cog]), y_true: KnownClass::AD, ..i };
        assert_eq!(label_next_examinations(&[i, j]), Err(LabelError::MixedTargets));
    }

    #[test]
    fn label_file_round_trip() {
        let mut t = [false; NUM_EXAM_HEADS];
        t[3] = true;
        let r = ExamLabelRecord::new("S1", 2, mask(&[Base, Cog]), &t);
        let mut buf = Vec::new();
        write_labels(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"subject_id\":\"S1\",\"visit_index\":2,\"mask\":[\"Base\",\"Cog\"]"));
        let back = read_labels(&text).unwrap();
        assert_eq!(back, vec![r]);
        assert_eq!(back[0].target(), Some(t));
    }
}
