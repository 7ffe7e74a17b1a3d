use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("malformed pixmap {path}: {reason} (byte offset {offset})")]
    Pixmap {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Io { .. } => 4,
            Error::Checkpoint(_) | Error::Pixmap { .. } | Error::Json(_) => 4,
            Error::Shape { .. } | Error::Config(_) | Error::Dataset(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
