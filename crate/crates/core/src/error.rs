use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation that needs anchors was called with `K = 0`.
    #[error("feature disabled: {0}")]
    Disabled(&'static str),

    #[error("class {class} has no samples in the refinement pool")]
    MissingClass { class: usize },

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
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

    /// Short machine-readable class name, used by the CLI's error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Disabled(_) => "disabled",
            Error::MissingClass { .. } => "missing-class",
            Error::Parse { .. } => "parse",
            Error::Incompatible(_) => "incompatible",
            Error::Io { .. } => "io",
        }
    }
}
