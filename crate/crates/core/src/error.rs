use std::io;

use thiserror::Error;

/// Errors raised across the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("line {line}: duplicate transaction id `{tx_id}`")]
    DuplicateTxId { line: usize, tx_id: String },

    #[error("line {line}: address `{address}` mapped to both {first} and {second}")]
    UserMapConflict {
        line: usize,
        address: String,
        first: u64,
        second: u64,
    },

    #[error("address `{0}` has no user id")]
    UnmappedAddress(String),

    #[error("transaction `{0}` is in the graph but not in the records")]
    Inconsistent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
