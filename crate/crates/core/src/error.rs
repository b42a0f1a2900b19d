use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A record does not conform to the declared covariate schema.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A matrix required to be positive definite is numerically rank deficient.
    #[error("numerical rank deficiency: {0}")]
    Rank(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Incompatible or incomplete configuration of a method/model combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// MCMC could not be started or produced unusable output.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Data outside the model's domain (e.g. non-positive survival time).
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;
