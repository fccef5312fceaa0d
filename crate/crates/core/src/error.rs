use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: argument {value} outside [0, 1]")]
    Domain { op: &'static str, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward already ran on this tape; reset it before another pass")]
    BackwardConsumed,

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no documents in {}", .0.display())]
    NoDocuments(PathBuf),

    #[error("unknown token `{token}` (closest: {})", suggestions.join(", "))]
    UnknownToken {
        token: String,
        suggestions: Vec<String>,
    },

    #[error("non-finite training loss at batch {batch} (parameter norms: {norms})")]
    NonFinite { batch: usize, norms: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
