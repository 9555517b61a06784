use thiserror::Error;

/// Errors raised by the simulation, functional and limit routines.
#[derive(Debug, Error)]
pub enum FragError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("p = {p} is outside the domain of the Laplace exponent (need p > {p_lower})")]
    Domain { p: f64, p_lower: f64 },

    #[error("quadrature failed to converge: estimate {value}, error {error}, requested {tolerance}")]
    QuadratureFailure { value: f64, error: f64, tolerance: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("Laplace exponent has no sign change on ({lower}, 0]: Φ(lower+) = {at_lower}, Φ(0) = {at_zero}")]
    NoRoot { lower: f64, at_lower: f64, at_zero: f64 },

    #[error("event budget of {0} exceeded")]
    BudgetExceeded(u64),

    #[error("incomplete horizon: {0}")]
    IncompleteHorizon(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FragError>;
