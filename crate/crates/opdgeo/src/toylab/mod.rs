//! A small, fully deterministic teacher/student testbed for comparing how
//! on-policy distillation and reinforcement learning move parameters.
//!
//! The pieces:
//! - [`task`]: synthetic token tasks (modular addition, copying) with a
//!   canonical held-out test slice and a disjoint validation pool;
//! - [`policy`]: the toy autoregressive network with exact hand-rolled
//!   gradients and per-module parameter addressing;
//! - [`train`]: the two estimators (reverse-KL distillation and REINFORCE),
//!   evaluation, the training loop, and supervised teacher construction.

pub mod policy;
pub mod task;
pub mod train;

pub use policy::{ForwardCache, Grads, PolicyConfig, ToyPolicy};
pub use task::{SyntheticTask, TaskConfig, TaskKind};
pub use train::{
    evaluate, make_base, make_teacher, train, EvalReport, FrozenBatch, FrozenItem, StepMetrics,
    TeacherConfig, ToyTrainer, TrainConfig, TrainMode, TrainRun,
};

use thiserror::Error;

/// Errors from the toy testbed.
#[derive(Debug, Error)]
pub enum ToylabError {
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error("policy vocabulary {vocab} is too small for this task (needs {needed})")]
    VocabTooSmall { vocab: usize, needed: usize },
    #[error("sequence length {len} outside supported range 1..={max}")]
    BadSequenceLength { len: usize, max: usize },
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("module shape or address mismatch at {path}")]
    ModuleMismatch { path: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("prompt is not well-formed for this task")]
    BadPrompt,
    #[error("distillation requires a teacher policy")]
    MissingTeacher,
    #[error("training diverged (non-finite parameters or loss) at step {step}")]
    Diverged { step: usize },
    #[error("teacher failed to converge: accuracy {accuracy:.3} after {steps} steps")]
    TeacherNotConverged { accuracy: f64, steps: usize },
}
