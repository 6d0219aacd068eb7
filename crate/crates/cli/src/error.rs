use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Convergence(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Stall(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Convergence(_) => 3,
            Self::Io(_) => 4,
            Self::Stall(_) => 5,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {err}", path.display()))
    }
}

impl From<dcl_core::Error> for CliError {
    fn from(err: dcl_core::Error) -> Self {
        match err.root() {
            dcl_core::Error::Stall { .. } => Self::Stall(err.to_string()),
            dcl_core::Error::Io(_) => Self::Io(err.to_string()),
            _ if err.is_convergence_failure() => Self::Convergence(err.to_string()),
            _ => Self::Config(err.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
