use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the framework or the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, geometry or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN or infinity where only finite values are allowed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Bad labels, empty datasets, undecodable inputs.
    #[error("data error: {0}")]
    Data(String),
    /// Dataset directory does not have the expected two-class layout.
    #[error("layout error: {0}")]
    Layout(String),
    /// API called out of order, e.g. backward before forward.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"CXR1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("shape mismatch for {name}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("stored configuration does not match: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("cannot read checkpoint {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
