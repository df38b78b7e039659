//! Crate-wide error type.

/// Error type shared across all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// API contract violation (e.g. non-scalar loss passed to backward).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid or inconsistent data.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Non-finite values where finite ones are required.
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// Internal invariant broken (e.g. stale packed expert cache).
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
