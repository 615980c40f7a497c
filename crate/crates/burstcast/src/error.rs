//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input violates a data invariant (negative count, duplicate cell, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Incompatible tensor or vector shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or unusable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure (non-finite loss, Cholesky breakdown, ...).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Operation called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;
