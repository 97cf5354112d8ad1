//! Sensitivities of parametric nonlinear programs.
//!
//! The crate computes Jacobians of NLP solution maps `θ ↦ x(θ)`: the
//! classical implicit-function system on the KKT conditions when the
//! solution is regular, and a proximally regularized surrogate system that
//! stays well posed when strict complementarity, LICQ or second-order
//! sufficiency fail. It ships a dense SQP solver, a finite-difference
//! oracle, the trajectory-optimization and MPC experiments, and a CLI.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod sensitivity;
pub mod sqp;

pub use error::{Error, Result};
