use std::path::PathBuf;

use tilelut::tensor_io::TensorIoError;

/// Everything a subcommand can fail with, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    TensorFile {
        path: PathBuf,
        #[source]
        source: TensorIoError,
    },
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn tensor_file(path: impl Into<PathBuf>, source: TensorIoError) -> Self {
        CliError::TensorFile {
            path: path.into(),
            source,
        }
    }

    /// 1 for bad input or failed checks, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } => 2,
            CliError::TensorFile { source, .. } => match source {
                TensorIoError::Io(_) => 2,
                _ => 1,
            },
        }
    }
}

/// Library errors are all input problems from the CLI's point of view.
pub fn invalid<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}
