//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by tensor kernels, the network, training, attribution
/// and the evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A configuration value is outside its legal range.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a precondition (empty mask, single-class labels, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A numeric guard tripped (non-finite value, divergent loss, degenerate statistic).
    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: &'static str, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// File-format violation (bad magic, truncated payload, CRC mismatch).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn numeric(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { context, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
