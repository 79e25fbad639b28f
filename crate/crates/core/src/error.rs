//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the toolkit.
///
/// The variants mirror the failure classes of the public operations:
/// malformed bytes, invariant violations, bad call arguments, insufficient
/// data for a request, numeric blow-ups, and plain I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// File does not match the expected binary or text format.
    #[error("format error: {0}")]
    Format(String),

    /// Declared payload size disagrees with the bytes actually present.
    #[error("truncated or oversized payload: {0}")]
    Truncated(String),

    /// A domain invariant was violated by otherwise well-formed input.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The data cannot satisfy the request (not enough speakers, segments, ...).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Scoring was requested on an empty or degenerate evaluation set.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// JSON or text syntax error.
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
