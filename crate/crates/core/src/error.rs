use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Pgm(#[from] PgmError),

    #[error(transparent)]
    Index(#[from] IndexError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"OSGN\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("tensor `{name}`: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("tensor #{position}: expected `{expected}`, found `{found}`")]
    NameMismatch {
        position: usize,
        expected: String,
        found: String,
    },

    #[error("checkpoint holds {found} model tensors, model needs {expected}")]
    Count { found: usize, expected: usize },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("unsupported netpbm variant {0:?}; only binary P5 graymaps are read")]
    UnsupportedFormat(String),

    #[error("not a PGM file (bad magic)")]
    BadMagic,

    #[error("malformed PGM header: {0}")]
    Header(String),

    #[error("unsupported maxval {0}, only 255 is accepted")]
    MaxVal(u32),

    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("line {line}: malformed record ({reason})")]
    Malformed { line: usize, reason: String },

    #[error("line {line}: id `{id}` duplicates line {first_line}")]
    DuplicateId {
        line: usize,
        id: String,
        first_line: usize,
    },

    #[error(
        "line {line}: id `{id}` appears in both train and test splits (also line {first_line})"
    )]
    SplitLeak {
        line: usize,
        id: String,
        first_line: usize,
    },

    #[error("line {line}: missing file {path}")]
    MissingFile { line: usize, path: PathBuf },

    #[error("line {line}: image is {image:?} but mask is {mask:?}")]
    DimensionMismatch {
        line: usize,
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("line {line}: {source}")]
    Unreadable {
        line: usize,
        #[source]
        source: PgmError,
    },
}
