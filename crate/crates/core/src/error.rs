use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown identity {0}")]
    UnknownIdentity(String),
    #[error("state error: {0}")]
    State(String),
    #[error("similarity undefined: {0}")]
    Similarity(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("batching error: {0}")]
    Batching(String),
    #[error("reference index error: {0}")]
    Reference(String),
    #[error("stale reference index: built at parameter version {index}, live version {live}")]
    Stale { index: u64, live: u64 },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("container error in {path}: {msg}")]
    Container { path: PathBuf, msg: String },
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code: 2 for validation and integrity failures, 3 for
    /// numeric failures. Usage errors (1) are produced by the CLI itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
