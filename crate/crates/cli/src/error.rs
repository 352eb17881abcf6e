//! CLI errors and their exit codes.

use std::path::Path;

use danet_core::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    /// A verification failed (gradient check, non-finite training, bad data).
    #[error("check failed: {0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for check and validation failures, 2 for I/O and configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::Json(_) | Error::Config(_) | Error::Parse { .. } | Error::Format(_) | Error::Checkpoint(_) => 2,
                _ => 1,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_contract() {
        assert_eq!(CliError::Check("x".into()).exit_code(), 1);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Validation("v".into())).exit_code(), 1);
        assert_eq!(CliError::Core(Error::NonFinite("n".into())).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Checkpoint("c".into())).exit_code(), 2);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::io(Path::new("a"), io).exit_code(), 2);
    }
}
