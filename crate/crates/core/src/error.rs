use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input file is empty")]
    EmptyFile,

    #[error("shift must be in 1..=7, got {0}")]
    InvalidShift(u32),

    #[error("digests use different moduli ({0} vs {1})")]
    IncompatibleDigests(u64, u64),

    #[error("non-finite value encountered: {0}")]
    Numerics(String),

    #[error("training-mode batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("forward cache does not match this backward call: {0}")]
    CacheMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("digests were produced by different models ({0} vs {1})")]
    ModelMismatch(String, String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed data at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("not enough mutable bits: need {needed}, have {available}")]
    NoMutableBytes { needed: usize, available: usize },

    #[error("out of range: {0}")]
    Range(String),

    #[error("external hasher failed: {msg}; output: {output:?}")]
    Adapter { msg: String, output: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
