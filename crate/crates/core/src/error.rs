use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state {state:?} lies outside the basis truncated at {n_max} photons")]
    OutOfBasis { state: Vec<usize>, n_max: usize },

    /// Population beyond the truncation exceeds the leak tolerance.
    #[error("truncation overflow: weight {leaked:.3e} beyond {n_max} photons (need n_max >= {required})")]
    TruncationOverflow { n_max: usize, required: usize, leaked: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("non-unique stationary state: spectral gap {gap:.3e} at eigenvalue 1")]
    NonUniqueStationary { gap: f64 },

    #[error("spectral radius of the loop-to-loop block is {radius}, stationary tensors need < 1")]
    SpectralRadius { radius: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("moment <a†^{creation:?} a^{annihilation:?}> is required but not available")]
    MissingMoment { creation: Vec<usize>, annihilation: Vec<usize> },

    #[error("size guard exceeded: {0}")]
    TooLarge(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
