use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid pyramid or architecture spec: {0}")]
    InvalidSpec(String),

    #[error("bad magic {0:?}, expected \"HSTN\"")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("tensor file holds {found} data but {expected} was requested")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("loss is undefined: every pixel is labelled ignore")]
    UndefinedLoss,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
