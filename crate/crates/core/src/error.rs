use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{predicted} predicted boxes cannot cover {ground_truth} ground-truth instances")]
    TooFewPredictions {
        predicted: usize,
        ground_truth: usize,
    },

    #[error("scene {scene} has {instances} instances but the model predicts at most {h_max} boxes")]
    TooManyInstances {
        scene: String,
        instances: usize,
        h_max: usize,
    },

    #[error("index {index} out of range for {context} of length {len}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("infeasible generator config: {0}")]
    Infeasible(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("checkpoint does not match model config: {0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
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

    /// True for errors caused by the caller's inputs, false for broken internal invariants.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteGradient(_))
    }
}
