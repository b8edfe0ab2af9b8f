use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, rejected before any training starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or layer shapes do not chain.
    #[error("shape error: {0}")]
    Shape(String),

    /// A forward cache no longer matches the network it is used with.
    #[error("internal error: {0}")]
    Internal(String),

    /// Client and server disagree on the partition plan or payload layout.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training error in round {round}, client {client}: {message}")]
    Training {
        round: usize,
        client: usize,
        message: String,
    },

    #[error("load error in {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
