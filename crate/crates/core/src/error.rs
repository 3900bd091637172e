use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFiniteValue { context: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index range [{start}, {end}) out of bounds for length {len}")]
    IndexOutOfRange { start: usize, end: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no annotations supplied")]
    EmptyAnnotations,

    #[error("at least two annotators required, got {0}")]
    TooFewUsers(usize),

    #[error("key segment [{start}, {end}) has degenerate sampling weights")]
    DegenerateWeights { start: usize, end: usize },

    #[error("subset kernel is singular (subset has zero probability)")]
    SingularSubset,

    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("selection is empty")]
    EmptySelection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("video {video}: {source}")]
    Video {
        video: String,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}, video {video}: {source}")]
    Training {
        epoch: usize,
        video: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated file (expected {expected} bytes, found {found})")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: non-finite entry at byte offset {offset}")]
    NonFiniteEntry { path: PathBuf, offset: u64 },

    #[error("{path}: checksum mismatch")]
    ChecksumMismatch { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    VersionUnsupported { path: PathBuf, version: u32 },

    #[error("{path}: malformed field `{field}`: {reason}")]
    Malformed {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFiniteValue {
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
