//! Two-stage mini-batch Adam training.
//!
//! Stage one fits the encoder, diagnosis and decoder on the mixed
//! diagnosis/reconstruction loss. Stage two freezes them and fits the
//! examination head and the per-head log-sigmas on the selection loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureSequence, KnownClass, NUM_EXAM_HEADS};
use crate::error::BackboneError;
use crate::seed;

use super::loss::{head_balances, HeadBalance, LossMix};
use super::model::{BackboneModel, Gradients, PooledInput};

pub const DEFAULT_LEARNING_RATE: f64 = 0.0005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub hidden: usize,
    pub loss_mix: LossMix,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            stage1_epochs: 8,
            stage2_epochs: 4,
            hidden: 32,
            loss_mix: LossMix::default(),
            seed: 0,
        }
    }
}

/// Examination-head target: one flag per requestable category.
pub type ExamHeadTarget = [bool; NUM_EXAM_HEADS];

/// One strategy sample, already pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: PooledInput,
    pub class: KnownClass,
    pub exam_target: Option<ExamHeadTarget>,
    pub visit_index: u32,
}

impl TrainingExample {
    pub fn from_sequence(
        seq: &FeatureSequence<'_>,
        class: KnownClass,
        exam_target: Option<ExamHeadTarget>,
    ) -> Result<Self, BackboneError> {
        Ok(TrainingExample {
            input: PooledInput::from_sequence(seq)?,
            class,
            exam_target,
            visit_index: seq.current_visit(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: BackboneModel,
    /// Mean loss per epoch.
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, model: &mut BackboneModel, grad: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in model
            .params_mut()
            .zip(grad.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

fn validate(dataset: &[TrainingExample], config: &TrainConfig) -> Result<usize, BackboneError> {
    let first = dataset.first().ok_or(BackboneError::EmptyDataset)?;
    let dim = first.input.0.len();
    let width = PooledInput::width_of(dim)
        .ok_or_else(|| BackboneError::Shape(format!("pooled input of length {dim}")))?;
    if let Some(bad) = dataset.iter().find(|e| e.input.0.len() != dim) {
        return Err(BackboneError::Shape(format!(
            "pooled inputs of length {dim} and {}",
            bad.input.0.len()
        )));
    }
    if config.batch_size == 0 || config.hidden == 0 {
        return Err(BackboneError::Shape("batch size and hidden width must be >= 1".into()));
    }
    Ok(width)
}

/// Mean stage-one loss of `model` over `dataset`.
pub fn mean_diagnosis_loss(model: &BackboneModel, dataset: &[TrainingExample], mix: LossMix) -> f64 {
    let mut scratch = Gradients::zeros_like(model);
    let total: f64 = dataset
        .iter()
        .map(|e| model.diagnosis_step(&e.input.0, &e.class.one_hot(), mix, &mut scratch))
        .sum();
    total / dataset.len().max(1) as f64
}

/// Stage one from a fresh initialization.
pub fn train_stage1(
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(BackboneModel, Vec<f64>), BackboneError> {
    let width = validate(dataset, config)?;
    let mut rng = seed::stream_rng(config.seed, 10);
    let mut model = BackboneModel::initialize(width, config.hidden, &mut rng);
    let mut adam = Adam::new(config.learning_rate, model.params().count());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.stage1_epochs);
    let mut grad = Gradients::zeros_like(&model);
    for epoch in 0..config.stage1_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.scale(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let e = &dataset[i];
                batch_loss +=
                    model.diagnosis_step(&e.input.0, &e.class.one_hot(), config.loss_mix, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(BackboneError::TrainingDiverged { epoch });
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grad);
            epoch_loss += batch_loss;
        }
        if !model.is_finite() {
            return Err(BackboneError::TrainingDiverged { epoch });
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, history))
}

/// Per-head (positives, negatives) over the examples carrying exam targets.
pub fn exam_head_counts(dataset: &[TrainingExample]) -> [(u64, u64); NUM_EXAM_HEADS] {
    let mut counts = [(0u64, 0u64); NUM_EXAM_HEADS];
    for target in dataset.iter().filter_map(|e| e.exam_target.as_ref()) {
        for (c, t) in counts.iter_mut().zip(target) {
            if *t {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
    }
    counts
}

/// Mean selection loss (data term plus log-sigma regularizer).
pub fn mean_exam_loss(
    model: &BackboneModel,
    dataset: &[TrainingExample],
    balances: &[Option<HeadBalance>; NUM_EXAM_HEADS],
) -> f64 {
    let mut scratch = Gradients::zeros_like(model);
    let labeled: Vec<_> = dataset.iter().filter(|e| e.exam_target.is_some()).collect();
    let data: f64 = labeled
        .iter()
        .map(|e| model.exam_step(&e.input.0, e.exam_target.as_ref().unwrap(), balances, &mut scratch))
        .sum();
    let reg: f64 = (0..NUM_EXAM_HEADS)
        .filter(|h| balances[*h].is_some())
        .map(|h| model.log_sigmas[h])
        .sum();
    data / labeled.len().max(1) as f64 + reg
}

/// Stage two on top of a stage-one model; encoder, diagnosis and decoder
/// stay frozen. Examples without exam targets are ignored.
pub fn train_stage2(
    mut model: BackboneModel,
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(BackboneModel, Vec<f64>), BackboneError> {
    let labeled: Vec<&TrainingExample> = dataset.iter().filter(|e| e.exam_target.is_some()).collect();
    if labeled.is_empty() {
        return Ok((model, Vec::new()));
    }
    let balances = head_balances(&exam_head_counts(dataset));
    let mut rng = seed::stream_rng(config.seed, 20);
    let mut adam = Adam::new(config.learning_rate, model.params().count());
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(config.stage2_epochs);
    let mut grad = Gradients::zeros_like(&model);
    for epoch in 0..config.stage2_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.scale(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let e = labeled[i];
                batch_loss += model.exam_step(
                    &e.input.0,
                    e.exam_target.as_ref().expect("filtered"),
                    &balances,
                    &mut grad,
                );
            }
            if !batch_loss.is_finite() {
                return Err(BackboneError::TrainingDiverged { epoch });
            }
            grad.scale(1.0 / batch.len() as f64);
            for head in 0..NUM_EXAM_HEADS {
                if balances[head].is_some() {
                    grad.log_sigmas[head] += 1.0;
                }
            }
            adam.step(&mut model, &grad);
            epoch_loss += batch_loss;
        }
        if !model.is_finite() {
            return Err(BackboneError::TrainingDiverged { epoch });
        }
        let reg: f64 = (0..NUM_EXAM_HEADS)
            .filter(|h| balances[*h].is_some())
            .map(|h| model.log_sigmas[h])
            .sum();
        history.push(epoch_loss / labeled.len() as f64 + reg);
    }
    Ok((model, history))
}

/// Both stages. Stage two runs on the examples that carry exam targets.
pub fn train(dataset: &[TrainingExample], config: &TrainConfig) -> Result<TrainOutcome, BackboneError> {
    let (model, stage1_loss) = train_stage1(dataset, config)?;
    let (model, stage2_loss) = train_stage2(model, dataset, config)?;
    Ok(TrainOutcome {
        model,
        stage1_loss,
        stage2_loss,
    })
}

/// The first-visit model: the same procedure restricted to visit 0.
pub fn train_first_visit_variant(
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainOutcome, BackboneError> {
    let first: Vec<TrainingExample> = first_visit_examples(dataset).cloned().collect();
    if first.is_empty() {
        return Err(BackboneError::EmptyDataset);
    }
    train(&first, config)
}

pub fn first_visit_examples(dataset: &[TrainingExample]) -> impl Iterator<Item = &TrainingExample> {
    dataset.iter().filter(|e| e.visit_index == 0)
}
