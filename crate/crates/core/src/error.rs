use thiserror::Error;

use crate::evolve::TrajectoryRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user or programmatic configuration; `field` names the offender.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("operator assembly failed: {0}")]
    Assembly(String),

    /// A linear or eigen iteration ran out of iterations.
    #[error("{method} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        method: String,
        iterations: usize,
        residual: f64,
    },

    /// Damped Newton failed; carries the last iterate and the residual history.
    #[error("Newton iteration diverged after {} iterations (last residual {:.3e})", .residual_history.len(), .residual_history.last().copied().unwrap_or(f64::NAN))]
    Divergence {
        last_iterate: Vec<f64>,
        residual_history: Vec<f64>,
    },

    #[error("solver converged to the trivial branch (max W = {max_w:.3e})")]
    TrivialBranch { max_w: f64 },

    #[error("fixed-point iteration did not converge in {} iterations (last update {:.3e})", .update_history.len(), .update_history.last().copied().unwrap_or(f64::NAN))]
    FixedPoint { update_history: Vec<f64> },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("time step {dt:.3e} rejected: exceeds stability bound {dt_max:.3e}")]
    StepRejected { dt: f64, dt_max: f64 },

    /// A runtime monitor failed. `scheme_suspect` separates discretization
    /// trouble (e.g. positivity loss) from an apparent violation of the
    /// analytical bound itself.
    #[error("verification failure at t = {t:.6}: {message}")]
    Verification {
        t: f64,
        message: String,
        scheme_suspect: bool,
        trajectory: Box<TrajectoryRecord>,
    },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Domain(_) => "domain",
            Error::Precondition(_) => "precondition",
            Error::Assembly(_) => "assembly",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Divergence { .. } => "divergence",
            Error::TrivialBranch { .. } => "trivial_branch",
            Error::FixedPoint { .. } => "fixed_point",
            Error::Invariant(_) => "invariant",
            Error::StepRejected { .. } => "step_rejected",
            Error::Verification { .. } => "verification",
            Error::Oracle(_) => "oracle",
            Error::Io(_) => "io",
        }
    }
}
