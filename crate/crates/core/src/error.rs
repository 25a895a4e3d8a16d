use thiserror::Error;

use crate::dit::SublayerId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible operands for {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step ordering error: {0}")]
    Ordering(String),

    #[error("cold cache: nothing recorded for {0} before step {1}")]
    ColdCache(SublayerId, usize),

    #[error("reuse limit {limit} exhausted for {id} at step {step}")]
    ReuseLimit {
        id: SublayerId,
        step: usize,
        limit: usize,
    },

    #[error("insufficient history for gradient extrapolation of {0} at step {1}")]
    InsufficientHistory(SublayerId, usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incomplete feature log: {0}")]
    IncompleteLog(String),

    #[error("incomplete statistics: {0}")]
    IncompleteStats(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: numerical failures are distinguished
    /// from everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 2,
            _ => 1,
        }
    }
}
