use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite values produced at step {step}")]
    NonFinite { step: usize },

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("linear solve failed (condition estimate {condition:e})")]
    SolveFailed { condition: f64 },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GeoError {
    /// Numerical failures (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GeoError::NonFinite { .. }
                | GeoError::NotConverged { .. }
                | GeoError::SolveFailed { .. }
                | GeoError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, GeoError>;
