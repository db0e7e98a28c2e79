use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("unknown dataset `{name}` (known: {known})")]
    UnknownDataset { name: String, known: String },
    #[error("bad data file {path}: {message}")]
    BadData { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported image size {height}x{width}; set `arch` explicitly")]
    UnsupportedImageSize { height: usize, width: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("architecture mismatch: checkpoint {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("training cancelled at step {0}")]
    Cancelled(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
