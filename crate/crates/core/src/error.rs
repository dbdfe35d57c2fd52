use std::path::PathBuf;

use foodwaste_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint mismatch at tensor `{name}`: {detail}")]
    Mismatch { name: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Io(_)) | Error::Io { .. } => "io",
            Error::Tensor(TensorError::Format(_)) | Error::Format { .. } => "format",
            Error::Tensor(TensorError::Config(_)) | Error::Config(_) => "config",
            Error::Mismatch { .. } => "mismatch",
            Error::Tensor(_) | Error::Input(_) => "input",
        }
    }
}
