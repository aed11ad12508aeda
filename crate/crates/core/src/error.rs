use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("transform is singular (|det| = {det:e} below threshold)")]
    SingularTransform { det: f64 },

    #[error("image dimensions do not match: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("image too small: {width}x{height}, need at least {min} per side")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("landmark/displacement counts do not match: {0} vs {1}")]
    CountMismatch(usize, usize),

    #[error("degenerate point set: all points coincide")]
    DegeneratePointSet,

    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("inconsistent observation shapes: expected {expected}, got {got}")]
    InconsistentShapes { expected: usize, got: usize },

    #[error("dataset too small: {0} pairs, need at least {1}")]
    DatasetTooSmall(usize, usize),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed ground truth in {path}, line {line}: {reason}")]
    MalformedGroundTruth {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown category prefix {prefix:?} in id {id:?}")]
    UnknownCategory { id: String, prefix: char },

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("corrupt image file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("i/o failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
