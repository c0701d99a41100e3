//! Train/validation/test assignment for the closed and real-world settings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Cohort, Label};
use crate::error::CohortError;
use crate::seed;

pub const TRAIN_UPPER: f64 = 0.8;
pub const VALIDATION_UPPER: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// AD/CN randomized; every MCI and SMC subject goes to test.
    RealWorld,
    /// AD/CN only.
    Closed,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real-world" => Ok(SplitMode::RealWorld),
            "closed" => Ok(SplitMode::Closed),
            other => Err(format!("unknown mode {other:?} (expected real-world or closed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitSpec {
    pub fn partition_of(&self, subject_id: &str) -> Option<Partition> {
        self.assignment.get(subject_id).copied()
    }

    pub fn subjects_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, p)| **p == partition)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.subjects_in(partition).count()
    }

    pub fn save(&self, path: &Path) -> Result<(), CohortError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CohortError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// The uniform draw for one subject: a function of the id and seed only.
fn subject_draw(subject_id: &str, seed: u64) -> f64 {
    seed::stream_rng(seed, seed::stable_hash(subject_id)).gen::<f64>()
}

pub fn split_clinical_aibench(
    cohort: &Cohort,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitSpec, CohortError> {
    let ad = cohort.subjects.iter().filter(|s| s.label() == Label::AD).count();
    let cn = cohort.subjects.iter().filter(|s| s.label() == Label::CN).count();
    if (ad == 0) != (cn == 0) {
        return Err(CohortError::DegenerateSplit(format!(
            "{ad} AD and {cn} CN subjects; both known classes are required"
        )));
    }
    if mode == SplitMode::Closed && ad == 0 {
        return Err(CohortError::DegenerateSplit(
            "closed setting needs AD and CN subjects".into(),
        ));
    }
    let mut assignment = BTreeMap::new();
    for subject in &cohort.subjects {
        let partition = match subject.label() {
            Label::AD | Label::CN => {
                let u = subject_draw(&subject.id, seed);
                if u < TRAIN_UPPER {
                    Partition::Train
                } else if u < VALIDATION_UPPER {
                    Partition::Validation
                } else {
                    Partition::Test
                }
            }
            Label::MCI | Label::SMC => match mode {
                SplitMode::RealWorld => Partition::Test,
                SplitMode::Closed => continue,
            },
            Label::Unlabeled => continue,
        };
        assignment.insert(subject.id.clone(), partition);
    }
    Ok(SplitSpec {
        mode,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ExamCategory, Subject, VisitRecord};

    fn cohort_of(labels: &[(Label, usize)], visits: u32) -> Cohort {
        let mut subjects = Vec::new();
        let mut k = 0;
        for (label, n) in labels {
            for _ in 0..*n {
                k += 1;
                let id = format!("s{k}");
                let visits = (0..visits)
                    .map(|v| VisitRecord {
                        subject_id: id.clone(),
                        visit_index: v,
                        label: *label,
                        blocks: [(ExamCategory::Base, vec![0.5])].into_iter().collect(),
                        indicators: BTreeMap::new(),
                    })
                    .collect();
                subjects.push(Subject { id, visits });
            }
        }
        Cohort::new(1, subjects).unwrap()
    }

    #[test]
    fn only_unknowns_go_to_test() {
        let cohort = cohort_of(&[(Label::MCI, 20)], 1);
        let split = split_clinical_aibench(&cohort, SplitMode::RealWorld, 1).unwrap();
        assert_eq!(split.count(Partition::Train), 0);
        assert_eq!(split.count(Partition::Validation), 0);
        assert_eq!(split.count(Partition::Test), 20);
    }

    #[test]
    fn train_fraction_concentrates() {
        let cohort = cohort_of(&[(Label::AD, 5000), (Label::CN, 5000)], 1);
        let split = split_clinical_aibench(&cohort, SplitMode::RealWorld, 42).unwrap();
        let frac = split.count(Partition::Train) as f64 / 10_000.0;
        // binomial sd = sqrt(0.8*0.2/1e4) = 0.004; 0.02 is five sd
        assert!((frac - 0.8).abs() <= 0.02, "train fraction {frac}");
        let val = split.count(Partition::Validation) as f64 / 10_000.0;
        assert!((val - 0.05).abs() <= 0.01, "validation fraction {val}");
    }

    #[test]
    fn closed_drops_unknowns_and_real_world_keeps_them() {
        let cohort = cohort_of(&[(Label::AD, 30), (Label::CN, 30), (Label::SMC, 10), (Label::MCI, 10)], 2);
        let closed = split_clinical_aibench(&cohort, SplitMode::Closed, 3).unwrap();
        assert_eq!(closed.assignment.len(), 60);
        let open = split_clinical_aibench(&cohort, SplitMode::RealWorld, 3).unwrap();
        assert_eq!(open.assignment.len(), 80);
        for s in &cohort.subjects {
            if matches!(s.label(), Label::MCI | Label::SMC) {
                assert_eq!(open.partition_of(&s.id), Some(Partition::Test));
            } else {
                assert_eq!(open.partition_of(&s.id), closed.partition_of(&s.id));
            }
        }
    }

    #[test]
    fn missing_known_class_is_degenerate() {
        let cohort = cohort_of(&[(Label::AD, 5), (Label::MCI, 5)], 1);
        assert!(matches!(
            split_clinical_aibench(&cohort, SplitMode::RealWorld, 0),
            Err(CohortError::DegenerateSplit(_))
        ));
    }

    #[test]
    fn split_is_order_independent() {
        let cohort = cohort_of(&[(Label::AD, 50), (Label::CN, 50)], 1);
        let mut reversed = cohort.clone();
        reversed.subjects.reverse();
        assert_eq!(
            split_clinical_aibench(&cohort, SplitMode::RealWorld, 9).unwrap(),
            split_clinical_aibench(&reversed, SplitMode::RealWorld, 9).unwrap()
        );
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("real-world".parse::<SplitMode>().unwrap(), SplitMode::RealWorld);
        assert_eq!("closed".parse::<SplitMode>().unwrap(), SplitMode::Closed);
        assert!("open".parse::<SplitMode>().is_err());
    }
}
