//! Training, checkpointing, evaluation, and the glue between them.

pub mod advtrain;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod evaluate;
pub mod infer;
pub mod optim;

pub use advtrain::{adv_train_baseline, AdvTrainConfig};
pub use checkpoint::{load_teachers, save_teachers, Checkpoint, CheckpointError};
pub use config::{ConfigError, DistillConfig};
pub use distill::{
    distill, distill_from, load_state, save_state, write_lambda_trace, write_train_log,
    DistillRun, StepLog, TrainState,
};
pub use evaluate::{
    evaluate_archive, evaluate_whitebox, evaluate_whitebox_grid, export_embeddings_csv,
    train_surrogate, DefenseKind, RobustnessReport, RobustnessRow,
};
pub use infer::{InferenceSession, SessionCounters};
pub use optim::{cosine_lr, AdamW, Moments};

use crate::attacks::AttackError;
use crate::diffmath::DiffError;
use crate::encoders::EncoderError;
use crate::geometry::GeomError;
use crate::losses::LossError;
use crate::projection::ProjectionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("schedule step {step} is past horizon {t_max}")]
    StepOutOfRange { step: usize, t_max: usize },
    #[error("{what} must be positive, got {got}")]
    NonPositive { what: &'static str, got: f32 },
    #[error("batch size {batch_size} is not a multiple of the class count {classes}")]
    BatchShape { batch_size: usize, classes: usize },
    #[error("training split has no samples for class {label}")]
    MissingClass { label: usize },
    #[error("non-finite loss at step {step} (per-teacher losses {losses:?})")]
    NonFiniteLoss { step: usize, losses: [f32; 3] },
    #[error("teacher bundle mismatch: {what}")]
    TeacherMismatch { what: String },
    #[error("config mismatch: {what}")]
    ConfigMismatch { what: String },
    #[error("malformed robustness report: {msg}")]
    ReportFormat { msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
