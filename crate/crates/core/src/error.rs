//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (token id, target class) out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Sequence exceeds model capacity.
    #[error("sequence too long: {0}")]
    Length(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (dataset records, grading input).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
