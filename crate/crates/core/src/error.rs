use std::path::PathBuf;

use cubepano_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Argument outside an operation's domain (FoV range, crop order, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for I/O failures, 2 for usage and configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 1,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite(_) => 1,
            Error::Domain(_) | Error::Config(_) | Error::Tensor(_) => 2,
        }
    }
}
