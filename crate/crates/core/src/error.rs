//! Error type shared by all modules in this crate.

use alloc::string::String;
use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    /// A tensor or parameter buffer had a different shape than required.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A configuration value or argument is outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A class identifier was not present in the dataset or episode.
    #[error("unknown class: {0}")]
    ClassNotFound(String),

    /// A class does not hold enough samples for the requested episode.
    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },

    /// Training produced a non-finite loss or parameter.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// An artifact was produced under a different model than the one supplied.
    #[error("model fingerprint mismatch: artifact carries {expected:#018x}, model is {got:#018x}")]
    ModelMismatch { expected: u64, got: u64 },

    /// An operation needs trained weights but the component is untrained or
    /// was trained for a different purpose.
    #[error("not usable here: {0}")]
    NotUsable(String),
}

impl CoreError {
    pub(crate) fn shape(expected: impl core::fmt::Display, got: impl core::fmt::Display) -> Self {
        CoreError::ShapeMismatch {
            expected: alloc::format!("{expected}"),
            got: alloc::format!("{got}"),
        }
    }

    pub(crate) fn invalid(msg: impl core::fmt::Display) -> Self {
        CoreError::InvalidArgument(alloc::format!("{msg}"))
    }
}
