use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum HcastError {
    #[error("format error: {0}")]
    Format(String),
    #[error("taxonomy violation: {0}")]
    TaxonomyViolation(String),
    #[error("index {index} out of range for level {level} (size {size})")]
    Range { level: usize, index: usize, size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite activations at {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("cannot resolve label directory {0:?} against the taxonomy")]
    LabelResolution(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HcastError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcastError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HcastError>;
