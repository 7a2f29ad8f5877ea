use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },

    #[error("dispersion root bracketing failed for mode {j} on ({lo}, {hi})")]
    RootBracket { j: usize, lo: f64, hi: f64 },

    #[error("spectral parameter {gamma} outside the continuous spectrum (-inf, {k2})")]
    SpectralDomain { gamma: f64, k2: f64 },

    #[error("argument {value} outside the open interval ({lo}, {hi})")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("quadrature did not converge: estimate {estimate:e}, error bound {error_bound:e}")]
    Quadrature { estimate: f64, error_bound: f64 },

    #[error("off-diagonal coupling pattern is not irreducible")]
    Reducible,

    #[error("top eigenvalue is not simple (separation {separation:e})")]
    DegenerateTop { separation: f64 },

    #[error("dissipation minimum {value} is attained by modes {first} and {second}")]
    NonUniqueMinimum {
        value: f64,
        first: usize,
        second: usize,
    },

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("step size too large: dz * max rate = {product} > {limit}")]
    StepSize { product: f64, limit: f64 },

    #[error("Gamma1 is not positive semidefinite (eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("trial function violates a constraint: {0}")]
    TrialFunction(String),

    #[error("growth-rate inequality violated: mu - 2 lambda = {gap:e}")]
    GrowthInequality { gap: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("linear solve failed: {0}")]
    Solve(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        key: key.to_string(),
        reason: reason.into(),
    }
}
