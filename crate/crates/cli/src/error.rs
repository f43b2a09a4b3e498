use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad command-line input; reported with usage text and exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("malformed bench CSV: {0}")]
    Schema(String),
    #[error("no rows match the plot filter: {0}")]
    EmptySeries(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ricl_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
