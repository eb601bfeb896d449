use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("intensity {m} outside [{lo}, {hi}]")]
    IntensityOutOfRange { m: usize, lo: usize, hi: usize },

    #[error("matching needs at most as many rows as columns, got {rows}x{cols}")]
    TooManyTargets { rows: usize, cols: usize },

    #[error("similarity loss needs a {0} frame but none exists")]
    MissingFrame(&'static str),

    #[error("split ratio unsatisfiable: {0}")]
    SplitUnsatisfiable(String),

    #[error("bad magic in tensor file: expected \"MDFF\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unsupported tensor dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("tensor file has {0} unexpected trailing bytes")]
    TrailingBytes(u64),

    #[error("tensor dimensions overflow: {0:?}")]
    DimOverflow(Vec<u64>),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
