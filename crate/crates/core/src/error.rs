use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm running statistics are uninitialized ({layer})")]
    UninitializedStats { layer: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parse error at column {pos}: {msg} (in {input:?})")]
    Parse { input: String, pos: usize, msg: String },

    #[error("cannot build layer {index} ({layer}): {msg}")]
    Build { index: usize, layer: String, msg: String },

    #[error("growth rejected: {0}")]
    Growth(String),

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(
        "non-finite loss at stage {stage} epoch {epoch} iter {iter}: loss_d={loss_d} loss_g={loss_g}"
    )]
    NonFinite { stage: String, epoch: usize, iter: usize, loss_d: f64, loss_g: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
