use nalgebra::DVector;
use thiserror::Error;

use crate::trace::IterateTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The generic inner solver ran out of iterations. `best` is the iterate
    /// with the smallest gradient-map norm seen.
    #[error(
        "inner solver stopped after {iterations} iterations with gradient-map norm {residual:e}"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: DVector<f64>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// An inner oracle failed at iteration `iteration`; `partial` holds every
    /// sample recorded before the failure.
    #[error("oracle failed at iteration {iteration}: {source}")]
    Oracle {
        iteration: usize,
        source: Box<Error>,
        partial: Box<IterateTrace>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
