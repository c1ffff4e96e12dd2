use std::io;

use thiserror::Error;

/// Errors raised anywhere in the barycenter stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },

    #[error("ill-conditioned matrix: eigenvalue {eigenvalue:e} is below the {threshold:e} threshold")]
    Conditioning { eigenvalue: f64, threshold: f64 },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("numerical failure during {phase} at step {step}: {detail}")]
    Numerical {
        phase: String,
        step: usize,
        detail: String,
    },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("conjugate solver stopped after {steps} steps with residual {residual:e}")]
    Solver { steps: usize, residual: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(phase: impl Into<String>, step: usize, detail: impl Into<String>) -> Self {
        Error::Numerical {
            phase: phase.into(),
            step,
            detail: detail.into(),
        }
    }

    /// True for errors that stem from floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Numerical { .. }
                | Error::NoConvergence { .. }
                | Error::Solver { .. }
                | Error::NotPsd { .. }
                | Error::Conditioning { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
