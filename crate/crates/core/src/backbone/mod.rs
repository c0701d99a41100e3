//! Reference scoring backbone and its training procedure.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{diagnosis_loss, exam_selection_loss, head_balances, HeadBalance, LossMix};
pub use model::{BackboneModel, BackboneOutput, Gradients, Linear, PooledInput};
pub use train::{
    train, train_first_visit_variant, train_stage1, train_stage2, ExamHeadTarget, TrainConfig,
    TrainOutcome, TrainingExample,
};
