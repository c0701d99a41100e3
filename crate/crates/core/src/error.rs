use thiserror::Error;

use crate::domain::ExamCategory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid visit {subject_id}/{visit_index}: {reason}")]
    InvalidVisit {
        subject_id: String,
        visit_index: u32,
        reason: String,
    },
    #[error("strategy mask must contain Base")]
    MaskWithoutBase,
    #[error("no {0} data for the requested strategy")]
    MissingExamData(ExamCategory),
    #[error("{category} block has width {found}, expected {expected}")]
    WidthMismatch {
        category: ExamCategory,
        expected: usize,
        found: usize,
    },
    #[error("visits of subject {0} are not strictly increasing")]
    VisitOrder(String),
    #[error("unknown examination category {0:?}")]
    UnknownCategory(String),
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid cohort config: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value outside loss domain: {0}")]
    Domain(String),
    #[error("exam head {head} has no positive or no negative examples")]
    DegenerateHead { head: usize },
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpenMaxError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("model not fitted: {0}")]
    ModelNotFitted(String),
    #[error("Weibull fit did not converge")]
    FitDiverged,
    #[error("tail has {distinct} distinct values, need at least {needed}")]
    InsufficientTail { distinct: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("duplicate strategy {0}")]
    DuplicateStrategy(String),
    #[error("strategies of one visit must share y_true")]
    MixedTargets,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("institution capability must include Base")]
    InvalidCapability,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("model failure: {0}")]
    Model(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("metric unstable: {skipped} of {trials} bootstrap trials undefined")]
    UnstableMetric { skipped: usize, trials: usize },
    #[error("empty input: {0}")]
    Empty(String),
}

/// Crate-level error for the pipeline and callers that mix modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    OpenMax(#[from] OpenMaxError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
