//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: config errors exit 2, a non-finite
//! loss exits 3, parameter-partition violations exit 4, missing inputs exit 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GcrlError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {file} line {line}: {msg}")]
    Data {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss: {term} diverged")]
    NonFinite { term: String },

    #[error("parameter partition violation: {0}")]
    Partition(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GcrlError>;
