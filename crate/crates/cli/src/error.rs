use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] mtslvr::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use mtslvr::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) => 1,
                E::Data(_) | E::Checkpoint(_) | E::Wav(_) | E::Io(_) => 2,
                E::NonFinite(_) | E::ShapeMismatch { .. } | E::InvalidOp { .. } => 3,
            },
        }
    }
}
