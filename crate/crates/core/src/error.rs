use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate attention row {row}: every key is masked")]
    DegenerateAttention { row: usize },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint archive. Each variant maps to a
/// distinct error code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("shape mismatch for {name}: checkpoint has {found}, model expects {expected}")]
    ShapeMismatch {
        name: String,
        found: String,
        expected: String,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checkpoint kind is {found}, expected {expected}")]
    WrongKind { found: String, expected: String },
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::VersionMismatch { .. } => 11,
            CheckpointError::TruncatedPayload { .. } => 12,
            CheckpointError::ShapeMismatch { .. } => 13,
            CheckpointError::Header(_) => 14,
            CheckpointError::WrongKind { .. } => 15,
        }
    }
}
