//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("mask row {row} has no unmasked positions")]
    EmptyMaskRow { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic under gradient check: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("label {0} is invalid: expected 0 (human) or 1 (machine)")]
    InvalidLabel(i64),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("no {class} samples match (band [{lo}, {hi}])")]
    EmptyClassInBand {
        class: String,
        lo: String,
        hi: String,
    },

    #[error("dataset has no {0} samples")]
    EmptyClass(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset record at line {line}: {message}")]
    Dataset { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
