use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: norm {norm:e} below {threshold:e}")]
    DegenerateEmbedding { norm: f64, threshold: f64 },

    #[error("context overflow: {len} tokens exceeds limit {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("index fingerprint {index} does not match checkpoint vision encoder {encoder}")]
    FingerprintMismatch { index: String, encoder: String },

    #[error("empty index")]
    EmptyIndex,

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("image: {0}")]
    Image(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
