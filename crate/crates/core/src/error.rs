use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval/model pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab_size: u32,
    },

    #[error("sequence length {len} is not a multiple of chunk length {chunk_len}")]
    NotChunkAligned { len: usize, chunk_len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: file has {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at vector {index}")]
    NonFinite { index: usize },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("bad magic in {0}")]
    BadMagic(&'static str),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(&'static str),

    #[error("index is not trained")]
    Untrained,

    #[error("empty index or database")]
    Empty,

    #[error("duplicate entry id {0}")]
    DuplicateId(u64),

    #[error("need at least {needed} training vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config hash mismatch: checkpoint {checkpoint:016x}, expected {expected:016x}")]
    ConfigHash { checkpoint: u64, expected: u64 },

    #[error("loss became non-finite at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code for machine-parsable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Config(_) => "E_CONFIG",
            Error::TokenOutOfRange { .. } => "E_TOKEN",
            Error::NotChunkAligned { .. } => "E_CHUNK",
            Error::Shape(_) => "E_SHAPE",
            Error::DimensionMismatch { .. } => "E_DIM",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::BadMagic(_) => "E_MAGIC",
            Error::Version { .. } => "E_VERSION",
            Error::Checksum(_) => "E_CHECKSUM",
            Error::Untrained => "E_UNTRAINED",
            Error::Empty => "E_EMPTY",
            Error::DuplicateId(_) => "E_DUPLICATE",
            Error::TooFewVectors { .. } => "E_TOO_FEW",
            Error::InvalidArgument(_) => "E_ARG",
            Error::ConfigHash { .. } => "E_CONFIG_HASH",
            Error::NonFiniteLoss { .. } => "E_NAN_LOSS",
            Error::CorpusTooSmall(_) => "E_CORPUS",
        }
    }
}
