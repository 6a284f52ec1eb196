use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the assimilation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("problem setup error: {0}")]
    Setup(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("forward model failed for member {member} at iteration {iteration}: {reason}")]
    ForwardFailure {
        member: usize,
        iteration: usize,
        reason: String,
    },

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("payload {path} is truncated: expected {expected} values, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("payload {path} does not match manifest dimensions: expected {expected} values, found {found}")]
    PayloadDimensions {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("payload {path} checksum mismatch")]
    ChecksumMismatch { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
