//! Error types shared across the toolkit.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, layers, loaders, and training.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// A configuration value violates a documented constraint.
    Config(String),
    /// An argument is outside the operation's domain (e.g. a transform
    /// size that is not a power of two).
    Domain(String),
    /// A file did not match its declared on-disk format.
    Format {
        path: String,
        offset: u64,
        detail: String,
    },
    /// An input record (e.g. a camera event) is invalid.
    Ingestion(String),
    /// A stated precondition was not met by the caller.
    Precondition(String),
    /// A numeric invariant broke (non-finite value, diverged loss).
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// JSON (de)serialization failure.
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Format {
                path,
                offset,
                detail,
            } => write!(f, "format error in {path} at byte {offset}: {detail}"),
            Error::Ingestion(msg) => write!(f, "ingestion error: {msg}"),
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
