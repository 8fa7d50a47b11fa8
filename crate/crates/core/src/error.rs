use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("{op}: invalid argument ({detail})")]
    Invalid { op: &'static str, detail: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"FDRA\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("truncated file")]
    Truncated,
    #[error("tensor {name}: shape {found:?} does not match config shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0}: missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {0}: not part of the configured model")]
    UnknownTensor(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for the CLI: 2 invalid configuration, 4 numeric
    /// failure, 3 for everything else (data, I/O, checkpoints, shapes).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
    .into()
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
    .into()
}
