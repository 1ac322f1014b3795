use mnp_core::MnpError;

/// Failure of a CLI command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] MnpError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(MnpError::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(MnpError::Io(std::io::Error::other(e)))
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    /// 1 for usage and configuration errors, 2 for data, file and protocol
    /// errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(MnpError::Config(_)) => EXIT_USAGE,
            CliError::Core(
                MnpError::Ingestion(_)
                | MnpError::MemoryInit { .. }
                | MnpError::Protocol(_)
                | MnpError::Checkpoint(_)
                | MnpError::Io(_),
            ) => EXIT_DATA,
            CliError::Core(MnpError::Numeric(_) | MnpError::Tensor(_) | MnpError::Contract(_)) => EXIT_NUMERIC,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
