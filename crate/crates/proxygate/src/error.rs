use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] proxygate_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: line {line}: {reason}", path.display())]
    Corpus {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("unversioned checkpoint")]
    UnversionedCheckpoint,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checks failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 for validation and IO problems, 2 for divergence, 3 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(proxygate_core::Error::Divergence(_)) => 2,
            CliError::CheckFailed(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
