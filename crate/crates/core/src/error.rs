use std::path::PathBuf;

use thiserror::Error;

use crate::arch::{ArchError, BlockKind};
use crate::evaluation::EvalError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("graph error at line {line}: {message}")]
    Graph { line: usize, message: String },
    #[error("token {token} is outside the vocabulary (size {size})")]
    Vocab { token: u32, size: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },
    #[error("label {0} is not a block library kind")]
    Label(BlockKind),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
