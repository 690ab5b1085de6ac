use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid environment: {0}")]
    Env(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("tree topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("worker failure: {0}")]
    Worker(String),
}

pub type Result<T> = std::result::Result<T, Error>;
