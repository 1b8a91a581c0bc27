use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite loss {loss} at iteration {iteration} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss {
        iteration: u64,
        batch_seed: u64,
        loss: f64,
    },

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("image too small: {width}x{height} cannot hold a {needed}x{needed} patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        needed: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checkpoint validation failures. Each variant has a stable numeric code.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("invalid embedded config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::CrcMismatch { .. } => 3,
            CheckpointError::Truncated => 4,
            CheckpointError::ShapeMismatch { .. } => 5,
            CheckpointError::MissingTensor(_) => 6,
            CheckpointError::UnexpectedTensor(_) => 7,
            CheckpointError::UnsupportedDtype(_) => 8,
            CheckpointError::InvalidConfig(_) => 9,
            CheckpointError::Malformed(_) => 10,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}
