//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor ops, model plumbing, data loading and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("unknown architecture id: {0}")]
    UnknownArch(String),

    #[error("unknown attack preset: {0}")]
    UnknownPreset(String),

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad record size: {len} bytes is not a whole number of 3073-byte records")]
    BadRecordSize { len: u64 },

    #[error("unexpected dimensions: {0}")]
    BadDimensions(String),

    #[error("mixed batches need an even batch size, got {0}")]
    OddBatchSize(usize),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("no completed epochs in training record")]
    NoEpochs,

    #[error("dataset missing: {0}")]
    DatasetMissing(String),

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
