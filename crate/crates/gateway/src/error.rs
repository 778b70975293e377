#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("challenge {0} has expired")]
    Expired(String),
    #[error("challenge {0} is unknown or was already used")]
    UnknownChallenge(String),
    #[error(transparent)]
    Core(#[from] same_core::Error),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;
