//! Error type shared by every IO-facing module.

use std::path::{Path, PathBuf};

use fewshot_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

/// Anything that can go wrong between disk and the numeric core.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its content is wrong: bad magic, truncation,
    /// malformed JSON/YAML/CSV, unexpected archive kind.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A configuration value was rejected; `key` is the dotted path of the
    /// offending entry (e.g. `attack.epsilon`).
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },

    /// Orchestration-level failure: missing artifacts, mismatched
    /// fingerprints, nothing to aggregate.
    #[error("{0}")]
    Run(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn run(message: impl Into<String>) -> Self {
        LabError::Run(message.into())
    }
}

/// Shorthand for tagging `io::Result` values with the path they came from.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| LabError::io(path, e))
    }
}
