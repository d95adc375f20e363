use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub(crate) fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<lobit_core::Error> for CliError {
    fn from(e: lobit_core::Error) -> Self {
        match e {
            lobit_core::Error::Checkpoint(msg) => CliError::Io(msg),
            lobit_core::Error::InvalidModel(msg) => CliError::Config(msg),
            lobit_core::Error::InvalidBits(b) => CliError::Config(format!("invalid bitwidth {b}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
