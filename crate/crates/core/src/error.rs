use thiserror::Error;

/// Errors shared across the simulation, policy, cost, and oracle layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("action outside the action box: {0}")]
    ActionOutOfBox(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("empty sample: {0}")]
    EmptySample(String),
    #[error("cannot average these policies pointwise: {0}")]
    Unaveragable(String),
    #[error("enumeration too large: {0}")]
    ExplosionGuard(String),
    #[error("unsupported sample sizes for exact transport: {0}")]
    UnsupportedSize(String),
    #[error("stage cost returned a negative value: {0}")]
    NegativeCost(String),
    #[error("diffusion matrix is singular: {0}")]
    SingularDiffusion(String),
    #[error("cost has no declared uniform bound; reweighting refused: {0}")]
    UnboundedCostRefused(String),
    #[error("quadratic form is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("optimizer diverged: {0}")]
    Divergence(String),
    #[error("config parse error: {0}")]
    ParseError(String),
    #[error("config semantic error: {0}")]
    SemanticError(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
