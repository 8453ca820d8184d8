use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("query row {0} has no allowed keys")]
    EmptyMaskRow(usize),

    #[error("matrix is not {property}: {detail}")]
    Matrix { property: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing {0}")]
    Missing(String),

    #[error("precondition for {pattern} not met: {reason}")]
    Precondition { pattern: &'static str, reason: String },

    #[error("unknown code: {0}")]
    UnknownCode(String),

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
