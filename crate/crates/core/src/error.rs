use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TwmError>;

#[derive(Debug, Error)]
pub enum TwmError {
    #[error("empty logits")]
    EmptyLogits,

    #[error("non-finite logit")]
    NonFiniteLogit,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("unrecognized format")]
    UnrecognizedFormat,

    #[error("corrupt file: expected {expected} bytes, found {found}")]
    Corrupt { expected: usize, found: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for sequence of {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("insufficient negatives: need at least 2 pairs, got {0}")]
    InsufficientNegatives(usize),

    #[error("no visual context")]
    NoVisualContext,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TwmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TwmError::Io {
            path: path.into(),
            source,
        }
    }

    /// I/O failures (missing files, unwritable paths) as opposed to
    /// validation failures of well-formed requests.
    pub fn is_io(&self) -> bool {
        matches!(self, TwmError::Io { .. })
    }
}
