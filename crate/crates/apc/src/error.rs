//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected shape with {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate vector in {op}: norm {norm:e} below {eps:e}")]
    DegenerateVector { op: &'static str, norm: f64, eps: f64 },

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("{what} out of range: {value} not in [0, {bound})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("parameter sets misaligned; only in left: {left_only:?}, only in right: {right_only:?}, shape mismatches: {shape_mismatch:?}")]
    Misaligned {
        left_only: Vec<String>,
        right_only: Vec<String>,
        shape_mismatch: Vec<String>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
