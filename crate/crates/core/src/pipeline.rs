//! End-to-end workflow: generate, split, train, label, calibrate, evaluate.
//!
//! Each stage is a function over in-memory artifacts so the command line can
//! run them one at a time and tests can run them all at once.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{train_stage1, train_stage2, BackboneModel, PooledInput, TrainConfig, TrainingExample};
use crate::bench::{evaluate_system, EvaluationConfig, EvaluationReport, SessionTrace};
use crate::cohort::{generate_with_table, split_clinical_aibench, CohortConfig, Partition, SplitMode, SplitSpec};
use crate::domain::{
    build_feature_sequence, enumerate_strategies, CategorySet, Cohort, ExamCategory, KnownClass, StrategyMask,
};
use crate::error::{BackboneError, Error};
use crate::indicators::IndicatorTable;
use crate::labeler::{label_next_examinations, ExamLabelRecord, StrategyPrediction};
use crate::openmax::{indicators_on_record, pattern_from_indicators, AbnormalPattern, OpenMaxBank, OpenMaxConfig};
use crate::policy::{CostTable, EngineModel, PolicyConfig, PolicyEngine};
use crate::seed;

pub const DEFAULT_MAX_STRATEGIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: SplitMode,
    pub cohort: CohortConfig,
    pub train: TrainConfig,
    /// Strategies kept per training visit; 0 keeps all of them.
    pub max_strategies_per_visit: usize,
    pub first_visit_model: bool,
    pub openmax: OpenMaxConfig,
    pub calibrate_base_only: bool,
    pub policy: PolicyConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            mode: SplitMode::RealWorld,
            cohort: CohortConfig::default(),
            train: TrainConfig::default(),
            max_strategies_per_visit: DEFAULT_MAX_STRATEGIES,
            first_visit_model: true,
            openmax: OpenMaxConfig::default(),
            calibrate_base_only: false,
            policy: PolicyConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Derives every stage seed from `seed` and sets the split mode
    /// everywhere it is used.
    pub fn seeded(mut self, seed_value: u64) -> Self {
        self.seed = seed_value;
        self.cohort.seed = seed::derive_seed(seed_value, 1);
        self.train.seed = seed::derive_seed(seed_value, 3);
        self.openmax.seed = seed::derive_seed(seed_value, 4);
        self.evaluation.seed = seed::derive_seed(seed_value, 5);
        self.evaluation.bootstrap.seed = seed::derive_seed(seed_value, 6);
        self.evaluation.mode = self.mode;
        self
    }

    pub fn with_mode(mut self, mode: SplitMode) -> Self {
        self.mode = mode;
        self.evaluation.mode = mode;
        self
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive_seed(self.seed, 2)
    }

    fn strategy_seed(&self) -> u64 {
        seed::derive_seed(self.seed, 7)
    }
}

/// One training sample with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyExample {
    pub subject_id: String,
    pub visit_index: u32,
    pub mask: StrategyMask,
    pub example: TrainingExample,
}

/// The strategies of a visit used for training. Small masks, the full mask
/// and the cost-order prefixes that sessions walk through are always kept;
/// the rest is sampled down to `cap`.
pub fn training_strategies(
    all: Vec<StrategyMask>,
    cap: usize,
    costs: &CostTable,
    stream_seed: u64,
) -> Vec<StrategyMask> {
    if cap == 0 || all.len() <= cap {
        return all;
    }
    let full = *all.last().expect("at least the base mask");
    let mut prefixes = Vec::new();
    let mut walk = StrategyMask::base_only();
    for c in costs.order() {
        if full.contains(*c) {
            walk = walk.with(*c);
            prefixes.push(walk);
        }
    }
    let (mut keep, mut rest): (Vec<StrategyMask>, Vec<StrategyMask>) = all
        .into_iter()
        .partition(|m| m.len() <= 2 || *m == full || prefixes.contains(m));
    let mut rng = seed::rng(stream_seed);
    rest.shuffle(&mut rng);
    let room = cap.saturating_sub(keep.len());
    keep.extend(rest.into_iter().take(room));
    keep.sort_by_key(|m| (m.len(), m.iter().map(|c| c.index()).collect::<Vec<_>>()));
    keep
}

/// Pooled strategy samples of the known-class subjects in `partition`.
pub fn build_examples(
    cohort: &Cohort,
    split: &SplitSpec,
    partition: Partition,
    config: &PipelineConfig,
) -> Result<Vec<StrategyExample>, Error> {
    let visits: Vec<_> = cohort
        .subjects
        .iter()
        .filter(|s| split.partition_of(&s.id) == Some(partition))
        .filter_map(|s| s.label().known_class().map(|k| (s, k)))
        .flat_map(|(s, k)| s.visits.iter().map(move |v| (s, k, v)))
        .collect();
    let per_visit: Vec<Result<Vec<StrategyExample>, Error>> = visits
        .par_iter()
        .map(|(subject, class, visit)| {
            let history = subject.history_before(visit.visit_index);
            let stream = seed::stable_hash(&format!("{}#{}", visit.subject_id, visit.visit_index));
            let masks = training_strategies(
                enumerate_strategies(visit)?,
                config.max_strategies_per_visit,
                &config.policy.costs,
                seed::derive_seed(config.strategy_seed(), stream),
            );
            masks
                .into_iter()
                .map(|mask| {
                    let seq = build_feature_sequence(history, visit, mask)?;
                    Ok(StrategyExample {
                        subject_id: visit.subject_id.clone(),
                        visit_index: visit.visit_index,
                        mask,
                        example: TrainingExample::from_sequence(&seq, *class, None)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for v in per_visit {
        out.extend(v?);
    }
    if out.is_empty() {
        return Err(BackboneError::EmptyDataset.into());
    }
    Ok(out)
}

/// Main and first-visit backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbones {
    pub main: BackboneModel,
    pub first_visit: Option<BackboneModel>,
}

impl Backbones {
    pub fn route(&self, visit_index: u32) -> &BackboneModel {
        match (&self.first_visit, visit_index) {
            (Some(m), 0) => m,
            _ => &self.main,
        }
    }
}

fn first_visit_only(examples: &[StrategyExample]) -> Vec<TrainingExample> {
    examples
        .iter()
        .filter(|e| e.visit_index == 0)
        .map(|e| e.example.clone())
        .collect()
}

/// Stage one for both backbones.
pub fn train_backbones(examples: &[StrategyExample], config: &PipelineConfig) -> Result<Backbones, Error> {
    let all: Vec<TrainingExample> = examples.iter().map(|e| e.example.clone()).collect();
    let main_cfg = config.train.clone();
    let first_cfg = TrainConfig {
        seed: seed::derive_seed(config.train.seed, 1),
        ..config.train.clone()
    };
    let first = config.first_visit_model.then(|| first_visit_only(examples));
    let (main, first_visit) = rayon::join(
        || train_stage1(&all, &main_cfg),
        || match &first {
            Some(f) if !f.is_empty() => train_stage1(f, &first_cfg).map(Some),
            Some(_) => Err(BackboneError::EmptyDataset),
            None => Ok(None),
        },
    );
    let (main, main_loss) = main?;
    tracing::info!(loss = ?main_loss.last(), "main backbone trained");
    let first_visit = first_visit?.map(|(m, loss)| {
        tracing::info!(loss = ?loss.last(), "first-visit backbone trained");
        m
    });
    Ok(Backbones { main, first_visit })
}

fn predict_pooled(model: &BackboneModel, input: &PooledInput) -> Result<crate::backbone::BackboneOutput, Error> {
    Ok(model.forward_pooled(input)?)
}

/// Exam targets for every example, written into the examples and returned
/// as label records.
pub fn label_examples(
    examples: &mut [StrategyExample],
    backbones: &Backbones,
) -> Result<Vec<ExamLabelRecord>, Error> {
    let mut groups: BTreeMap<(String, u32), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry((e.subject_id.clone(), e.visit_index)).or_default().push(i);
    }
    let labeled: Vec<Result<Vec<(usize, ExamLabelRecord)>, Error>> = groups
        .par_iter()
        .map(|((subject, visit_index), idx)| {
            let model = backbones.route(*visit_index);
            let mut preds = Vec::with_capacity(idx.len());
            for &i in idx {
                let e = &examples[i];
                let out = predict_pooled(model, &e.example.input)?;
                preds.push(StrategyPrediction {
                    mask: e.mask,
                    y_true: e.example.class,
                    y_pred: out.class_probs,
                });
            }
            let targets = label_next_examinations(&preds)?;
            Ok(idx
                .iter()
                .map(|&i| {
                    let mask = examples[i].mask;
                    (i, ExamLabelRecord::new(subject, *visit_index, mask, &targets[&mask]))
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(examples.len());
    for group in labeled {
        for (i, record) in group? {
            examples[i].example.exam_target = record.target();
            records.push(record);
        }
    }
    Ok(records)
}

/// Applies label records to examples by (subject, visit, mask).
pub fn apply_labels(examples: &mut [StrategyExample], records: &[ExamLabelRecord]) -> usize {
    let index: BTreeMap<(&str, u32, StrategyMask), &ExamLabelRecord> = records
        .iter()
        .map(|r| ((r.subject_id.as_str(), r.visit_index, r.mask), r))
        .collect();
    let mut applied = 0;
    for e in examples.iter_mut() {
        if let Some(r) = index.get(&(e.subject_id.as_str(), e.visit_index, e.mask)) {
            e.example.exam_target = r.target();
            applied += 1;
        }
    }
    applied
}

/// Stage two for both backbones on labeled examples.
pub fn train_exam_heads(
    backbones: Backbones,
    examples: &[StrategyExample],
    config: &PipelineConfig,
) -> Result<Backbones, Error> {
    let all: Vec<TrainingExample> = examples.iter().map(|e| e.example.clone()).collect();
    let first = first_visit_only(examples);
    let first_cfg = TrainConfig {
        seed: seed::derive_seed(config.train.seed, 1),
        ..config.train.clone()
    };
    let Backbones { main, first_visit } = backbones;
    let (main, first_visit) = rayon::join(
        || train_stage2(main, &all, &config.train),
        || first_visit.map(|m| train_stage2(m, &first, &first_cfg)).transpose(),
    );
    Ok(Backbones {
        main: main?.0,
        first_visit: first_visit?.map(|(m, _)| m),
    })
}

/// Fits one OpenMax model per indicator profile from correctly classified
/// training strategies whose acquired set maps to that profile.
pub fn fit_openmax_bank(
    cohort: &Cohort,
    examples: &[StrategyExample],
    backbones: &Backbones,
    table: &IndicatorTable,
    config: &PipelineConfig,
) -> Result<OpenMaxBank, Error> {
    let sources = crate::openmax::indicator_sources(table);
    let patterns: Vec<Option<(CategorySet, KnownClass, AbnormalPattern)>> = examples
        .par_iter()
        .map(|e| {
            let out = backbones.route(e.visit_index).forward_pooled(&e.example.input)?;
            let predicted = if out.class_probs[0] >= out.class_probs[1] {
                KnownClass::AD
            } else {
                KnownClass::CN
            };
            if predicted != e.example.class {
                return Ok(None);
            }
            let subject = cohort.subject(&e.subject_id);
            let visit = subject
                .and_then(|s| s.visits.iter().find(|v| v.visit_index == e.visit_index))
                .ok_or_else(|| Error::Invalid(format!("{}#{} not in cohort", e.subject_id, e.visit_index)))?;
            let history = subject.map(|s| s.history_before(e.visit_index)).unwrap_or_default();
            let (values, measured) = indicators_on_record(history, &visit.indicators, e.mask.set(), table);
            let profile = measured.intersection(sources).with(ExamCategory::Base);
            let pattern = pattern_from_indicators(&values, table, Some(measured));
            Ok(Some((profile, e.example.class, pattern)))
        })
        .collect::<Result<_, Error>>()?;
    let bank = OpenMaxBank::fit(table, &config.openmax, config.calibrate_base_only, |profile| {
        let mut out = [Vec::new(), Vec::new()];
        for (p, class, pattern) in patterns.iter().flatten() {
            if *p == profile {
                out[class.index()].push(pattern.clone());
            }
        }
        out
    })?;
    Ok(bank)
}

pub fn engine_model(backbones: Backbones, bank: Option<OpenMaxBank>, table: IndicatorTable) -> EngineModel {
    EngineModel {
        main: backbones.main,
        first_visit: backbones.first_visit,
        openmax: bank,
        table,
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub cohort: Cohort,
    pub split: SplitSpec,
    pub labels: Vec<ExamLabelRecord>,
    pub engine: PolicyEngine<EngineModel>,
    pub report: EvaluationReport,
    pub traces: Vec<SessionTrace>,
}

/// Trains and calibrates an engine on the training partition.
pub fn train_engine(
    cohort: &Cohort,
    split: &SplitSpec,
    table: &IndicatorTable,
    config: &PipelineConfig,
) -> Result<(EngineModel, Vec<ExamLabelRecord>), Error> {
    let mut examples = build_examples(cohort, split, Partition::Train, config)?;
    tracing::info!(examples = examples.len(), "training strategies built");
    let backbones = train_backbones(&examples, config)?;
    let labels = label_examples(&mut examples, &backbones)?;
    let backbones = train_exam_heads(backbones, &examples, config)?;
    let bank = fit_openmax_bank(cohort, &examples, &backbones, table, config)?;
    tracing::info!(profiles = bank.calibrated(), "OpenMax profiles calibrated");
    Ok((engine_model(backbones, Some(bank), table.clone()), labels))
}

/// Everything from cohort generation to the evaluation report.
pub fn run_pipeline(config: &PipelineConfig, table: &IndicatorTable) -> Result<PipelineOutput, Error> {
    let cohort = generate_with_table(&config.cohort, table)?;
    let split = split_clinical_aibench(&cohort, config.mode, config.split_seed())?;
    let (model, labels) = train_engine(&cohort, &split, table, config)?;
    let engine = PolicyEngine::new(model, config.policy.clone())?;
    let (report, traces) = evaluate_system(&cohort, &split, &engine, table, &config.evaluation)?;
    Ok(PipelineOutput {
        cohort,
        split,
        labels,
        engine,
        report,
        traces,
    })
}
