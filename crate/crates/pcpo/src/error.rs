//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite input in {context}")]
    NonFiniteInput { context: &'static str },

    /// An intermediate network quantity blew up; the layer index points at the
    /// first affine stage that produced a non-finite value.
    #[error("non-finite intermediate value in layer {layer}")]
    NonFiniteIntermediate { layer: usize },

    #[error("sigma must be strictly positive")]
    NonPositiveSigma,

    #[error("empty batch in {context}")]
    EmptyBatch { context: &'static str },

    #[error("conjugate gradient produced a non-finite iterate at iteration {iteration}")]
    CgNonFinite { iteration: usize },

    #[error("conjugate gradient made no progress (relative residual {relative_residual})")]
    CgNoProgress { relative_residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("rollout worker {learner_id} panicked")]
    WorkerPanic { learner_id: usize },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
