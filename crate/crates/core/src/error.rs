use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate data: all {n} values lie within {spread:e} of each other")]
    DegenerateData { n: usize, spread: f64 },

    #[error("non-finite loss in {stage} epoch {epoch} batch {batch}: {detail}")]
    NonFinite {
        stage: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty subset: no samples satisfy w0 >= {threshold}")]
    EmptySubset { threshold: f64 },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("path already exists: {} (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::EmptySubset { .. } => 4,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
