//! Crate-wide error type.
//!
//! Every fallible operation in the lab returns [`Error`]; variants map onto
//! the failure families used throughout: shape/contract violations, bad
//! configuration, malformed data, file-format problems, numeric trouble and
//! training divergence.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, e.g. matmul inner extents.
    #[error("shape mismatch: {op} with shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Parse failure with source location.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Token or tensor index out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Checkpoint or artifact file violates its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A computation would exceed its stated budget.
    #[error("resource error: {0}")]
    Resource(String),

    /// Non-finite loss during training; carries the last usable checkpoint.
    #[error("training diverged at step {step} (last checkpoint: {last_checkpoint:?})")]
    Diverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
