use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or metric was called outside of its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    /// A metric has no value for the given inputs (for example an empty surface).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A parameter collection that must stay frozen was mutated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{term}` at epoch {epoch}")]
    NonFinite { term: String, epoch: usize },

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
