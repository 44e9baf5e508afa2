//! Pre-training, domain prompting and task prompting, the task templates that
//! turn every downstream problem into a mask, and inference.

mod stages;
mod template;
mod trainer;

pub use stages::{
    domain_view, finetune, fit_domain_prompts, fit_task_prompts, plan_for, predict, predict_window, pretrain, source_view, split_nodes,
    target_bounds, target_stats, truth_at, Prediction, StageOutput, TargetSpec, NORM_KEY,
};
pub use template::{task_mask, Setting, TaskKind, TaskTemplate, TrainMasking};
pub use trainer::{run_stage, validation_loss, DomainData, StageLog, StageSpec, Window};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: loss became non-finite ({loss}) at epoch {epoch}, batch {batch}")]
    Diverged { stage: String, epoch: usize, batch: usize, loss: f64 },
    #[error("invalid task template: {0}")]
    Template(String),
    #[error("not enough data: {0}")]
    NoData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
