use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: channel mismatch, expected {expected}, got {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },
    #[error("{op}: kernel size {size} must be odd")]
    EvenKernel { op: &'static str, size: usize },
    #[error("{op}: {what} {value} is not divisible by {divisor}")]
    Indivisible { op: &'static str, what: &'static str, value: usize, divisor: usize },
    #[error("{op}: index {index:?} out of range for bound {bound:?}")]
    IndexOutOfRange { op: &'static str, index: Vec<usize>, bound: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward already ran on this graph; record a new forward pass first")]
    GraphConsumed,
    #[error("encoder block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("nothing to train: no parameter group is enabled for the adapt stage")]
    NothingToTrain,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_block(self, block: usize) -> Self {
        Error::Block { block, source: Box::new(self) }
    }
}
