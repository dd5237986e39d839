//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter dimensions do not line up. `context` names the
    /// offending operation or layer.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// A forward trace supports one parameter-gradient and one
    /// input-gradient pass; further passes are rejected.
    #[error("forward trace already consumed for {0} gradients")]
    TraceConsumed(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: bad magic number: expected {expected}, got {actual}")]
    BadMagic {
        path: String,
        expected: u32,
        actual: u32,
    },

    #[error("{path}: truncated {what}")]
    Truncated { path: String, what: String },

    #[error("label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },

    #[error("non-finite loss at round {round}, client {client}, batch {batch}")]
    NonFiniteLoss {
        round: u64,
        client: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
