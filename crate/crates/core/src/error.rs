use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A training manifest references a class outside the seen set.
    #[error("inductive violation in {path} row {row}: class {class_id} is not a seen class")]
    Inductive {
        path: PathBuf,
        row: usize,
        class_id: u32,
    },

    #[error("dataset error in {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (configuration, data files,
    /// protocol preconditions) rather than by an internal fault.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Contract(_) => false,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
