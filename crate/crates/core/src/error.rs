use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("non-numeric cell {value:?} at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("too few samples: need at least {required}, found {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("non-finite value encountered at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("combinatorial guard exceeded: {count} > {limit}")]
    GuardExceeded { count: u128, limit: u128 },

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),

    #[error("factor {index} is not a rank-one symbol")]
    NotRankOne { index: usize },

    #[error("malformed moment pattern: {0}")]
    MalformedPattern(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
