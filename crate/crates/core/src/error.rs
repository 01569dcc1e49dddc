//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration detected at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// Scene placement could not satisfy layout invariants within the retry budget.
    #[error("scene infeasible: {0}")]
    SceneInfeasible(String),

    /// A dataset file failed checksum or structural validation.
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    /// Shapes of interacting tensors or feature maps disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A non-finite value surfaced where finite math is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training loss went NaN; `step` is the optimizer step that produced it.
    #[error("NaN loss at training step {step}")]
    NanLoss { step: usize },

    /// AP is undefined without ground truth.
    #[error("AP undefined: no ground-truth boxes in range")]
    ZeroGroundTruth,

    /// Zero-area box handed to the IoU kernel.
    #[error("degenerate (zero-area) box")]
    DegenerateBox,

    /// Checkpoint missing or unreadable.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
