use bode_core::BodeError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration file or override.
    #[error("{0}")]
    Config(String),
    /// Bad arguments or state-directory misuse.
    #[error("{0}")]
    Usage(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Oracle(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<BodeError> for CliError {
    fn from(e: BodeError) -> Self {
        match e {
            BodeError::Oracle(m) => CliError::Oracle(m),
            BodeError::Argument(m) => CliError::Usage(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(format!("corrupt state file: {e}"))
    }
}
