//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents. Carries both offending shapes.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid model/run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Command-line or file usage problem.
    #[error("{0}")]
    Usage(String),

    /// Training aborted (divergence, NaN gradient, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Produced a NaN/Inf while finite checking was enabled.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code: 0 success, 1 verification/training failure,
    /// 2 usage/configuration error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Shape { .. } => 2,
            Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => 2,
            Error::Train(_) | Error::NonFinite { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
