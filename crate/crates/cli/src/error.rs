use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Command failures, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("transport error: {0}")]
    Transport(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(blindrec::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Transport(_) => 2,
            CliError::Exists(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Validation(_) => 5,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<blindrec::Error> for CliError {
    fn from(e: blindrec::Error) -> Self {
        use blindrec::Error as E;
        match e {
            E::Transport(m) => CliError::Transport(m),
            E::PersonaParse { .. } => CliError::Transport(e.to_string()),
            E::Config(_) | E::Validation(_) | E::Argument(_) | E::InfeasibleSpec(_) | E::Parse { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
