use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("unknown variable {0} for this tape")]
    UnknownVar(usize),

    #[error("pattern `{0}` matches no parameter")]
    NoMatchingParameters(String),

    #[error("no trainable parameters remain")]
    NothingToTrain,

    #[error("optimizer state does not match the parameter registry: {0}")]
    OptimizerState(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("pgm format error in {path}: {reason}")]
    Pgm { path: PathBuf, reason: PgmError },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}` has shape {found:?}, config requires {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Reasons a PGM payload is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PgmError {
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported format {0} (only binary P5 is accepted)")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} is not 255")]
    MaxVal(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
