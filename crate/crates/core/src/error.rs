use std::path::PathBuf;

use crate::trainer::StepMetrics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid dataset file {path}: {reason}")]
    InvalidDatasetFile { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite {
        what: String,
        step: usize,
        history: Vec<StepMetrics>,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::InvalidDatasetFile { .. } => "invalid_dataset_file",
            Error::Shape(_) => "shape",
            Error::InvalidValue(_) => "invalid_value",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
