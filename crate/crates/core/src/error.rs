use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("state is not in canonical form")]
    NotCanonical,

    #[error("site {site} out of range for chain of {n} sites")]
    SiteOutOfRange { site: usize, n: usize },

    #[error("invalid cut {cut} for chain of {n} sites")]
    InvalidCut { cut: usize, n: usize },

    #[error("time step too large: gamma*dt = {0} exceeds 0.1")]
    StepTooLarge(f64),

    #[error("jump probability {0} is not below 1; reduce dt")]
    JumpProbability(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("trace drift {0:e} exceeds tolerance")]
    TraceDrift(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
