use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: input too short ({len} samples, need at least {min})")]
    InputTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chunk length {chunk_len} is degenerate for {len} frames (must be even and at most {max}); use a smaller chunk length")]
    DegenerateChunking {
        chunk_len: usize,
        len: usize,
        max: usize,
    },

    #[error("zero-energy signal in {0}")]
    ZeroEnergy(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unsupported wav format: {field} is {found}, expected {expected}")]
    WavFormat {
        field: &'static str,
        found: String,
        expected: &'static str,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("unresolvable manifest record `{record}`: {msg}")]
    Unresolvable { record: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
