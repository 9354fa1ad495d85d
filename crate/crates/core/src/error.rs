//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("{op}: shape mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A length must be divisible by a factor and is not.
    #[error("{what}: length {len} is not divisible by {divisor}")]
    NotDivisible {
        what: &'static str,
        len: usize,
        divisor: usize,
    },

    /// Invalid configuration (bad hyperparameters, unknown keys, infeasible specs).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary or CSV artifact; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Training loss became non-finite.
    #[error("training diverged (non-finite loss) at seed {seed}, epoch {epoch}, batch {batch}")]
    Diverged { seed: u64, epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
