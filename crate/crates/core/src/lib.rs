//! Numerical laboratory for a parabolic–elliptic chemotaxis system with
//! consumption, logistic growth and a Robin boundary condition for the signal.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod elliptic;
pub mod error;
pub mod evolve;
pub mod linops;
pub mod mesh;
pub mod oracle;
pub mod steady;

pub use error::{Error, Result};
pub use mesh::{build_grid, DomainSpec, Grid, ScalarField};
pub use steady::{fixed_point_steady, ModelParams, SteadyStatePair};
