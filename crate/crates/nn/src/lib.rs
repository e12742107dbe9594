//! Temporal learners for wearable hypoglycemia detection: a small
//! reverse-mode autodiff tape and the MLP, 1D-CNN, LSTM, GRU and TCN
//! architectures trained with class-weighted binary cross-entropy.

use thiserror::Error;

pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod train;

pub use model::{build, Family, Init, ModelSpec, Net};
pub use tape::{Graph, Tensor, Var};
pub use train::{train, History, TrainOpts, Weighting};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("model document: {0}")]
    Document(String),
}
