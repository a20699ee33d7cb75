use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("log of non-positive value {value} in {op}")]
    LogDomain { op: &'static str, value: f64 },

    #[error("empty last dimension in {op}")]
    EmptyDim { op: &'static str },

    #[error("attention row {row} has no unmasked key")]
    FullyMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token id {token} (vocabulary size {vocab})")]
    UnknownToken { token: usize, vocab: usize },

    #[error("input too short: {frames} raw frames for frame reduction {reduction}")]
    InputTooShort { frames: usize, reduction: usize },

    #[error("invalid alignment: {0}")]
    Alignment(String),

    #[error("chunk {chunk} holds {count} labels but has capacity {capacity}")]
    Capacity {
        chunk: usize,
        count: usize,
        capacity: usize,
    },

    #[error("utterance cannot be repaired: {labels} labels exceed total capacity {capacity}")]
    Unrepairable { labels: usize, capacity: usize },

    #[error("transducer grid: {0}")]
    Grid(String),

    #[error("instance too large for exhaustive enumeration (T + U = {0})")]
    TooLarge(usize),

    #[error("decoding: {0}")]
    Decode(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("data format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl ErrorClass {
    /// Process exit status for the command-line tool.
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::NonFinite { .. }
            | Error::LogDomain { .. }
            | Error::Diverged { .. }
            | Error::FullyMasked { .. }
            | Error::NonScalarLoss(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
