use std::path::PathBuf;

use thiserror::Error;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
    #[error(transparent)]
    Core(#[from] ibp_core::Error),
}

impl CliError {
    /// 1 for numeric or tolerance failures, 2 for usage, configuration and
    /// I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_) | CliError::Core(ibp_core::Error::Numeric { .. }) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
