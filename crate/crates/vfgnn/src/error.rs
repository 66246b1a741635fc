use thiserror::Error;

/// Top-level error type aggregating the per-subsystem failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),

    #[error(transparent)]
    Data(#[from] crate::graphdata::DataError),

    #[error(transparent)]
    Protocol(#[from] crate::vfl::ProtocolError),

    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(e) if e.is_config() => 2,
            Error::Numeric(_) => 3,
            Error::Attack(e) if e.is_numeric() => 3,
            _ => 1,
        }
    }
}
