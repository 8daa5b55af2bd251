use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cep_core::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for training
    /// divergence, 4 for I/O and file format problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use cep_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Divergence { .. }) => 3,
            CliError::Core(E::Io { .. } | E::Format(_)) => 4,
            CliError::Core(E::Domain(_) | E::InvalidInput(_) | E::DimMismatch { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}
