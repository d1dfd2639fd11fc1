use std::path::PathBuf;

use mubert_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}", fmt_data(.path, .line, .msg))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        msg: String,
    },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_data(path: &Option<PathBuf>, line: &Option<usize>, msg: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("data error in {}:{l}: {msg}", p.display()),
        (Some(p), None) => format!("data error in {}: {msg}", p.display()),
        _ => format!("data error: {msg}"),
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data { path: None, line: None, msg: msg.into() }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attaches a file path to a data error that lacks one.
    pub fn in_file(self, file: impl Into<PathBuf>) -> Self {
        match self {
            Error::Data { path: None, line, msg } => Error::Data { path: Some(file.into()), line, msg },
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::Io { .. } | Error::Generation(_) => 3,
            Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
