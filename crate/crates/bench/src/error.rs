use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] corrattack_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        use corrattack_core::Error as E;
        match self {
            BenchError::Config(_) | BenchError::Dataset(_) => 2,
            BenchError::Core(E::InvalidArgument(_)) => 2,
            BenchError::Core(E::OracleUnavailable(_) | E::Protocol(_)) => 3,
            BenchError::Core(_) => 4,
            BenchError::Io(_) => 2,
        }
    }
}
