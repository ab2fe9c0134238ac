use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("box {index} ({x0}, {y0}, {x1}, {y1}) lies outside a {width}x{height} frame")]
    BoxRange {
        index: usize,
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        width: usize,
        height: usize,
    },
    #[error("mask is not binary")]
    NotBinary,
    #[error("empty point set")]
    EmptySet,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

/// Failures while reading datasets from disk. Each variant carries a stable
/// code string.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("[{}] missing file {path}", self.code())]
    MissingFile { path: PathBuf },
    #[error("[{}] {path}:{line}: {reason}", self.code())]
    BoxParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("[{}] {path}: image is {found:?}, expected {expected:?}", self.code())]
    SizeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("[{}] {path}: {reason}", self.code())]
    ImageFormat { path: PathBuf, reason: String },
    #[error("[{}] {path}:{line}: {reason}", self.code())]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            DataError::MissingFile { .. } => "E_MISSING_FILE",
            DataError::BoxParse { .. } => "E_BOX_PARSE",
            DataError::SizeMismatch { .. } => "E_SIZE_MISMATCH",
            DataError::ImageFormat { .. } => "E_IMAGE_FORMAT",
            DataError::Manifest { .. } => "E_MANIFEST",
        }
    }
}
