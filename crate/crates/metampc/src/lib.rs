//! Meta-learned basis-function dynamics models with online Bayesian linear
//! regression, wrapped in model predictive controllers.
//!
//! The pipeline: approximate an unknown residual dynamics as a finite linear
//! combination of basis functions, optimize the basis hyperparameters across
//! a set of related tasks by maximizing a variational bound, then adapt only
//! the linear weights online while an MPC controls the plant.

pub mod blr;
pub mod envs;
pub mod error;
pub mod features;
pub mod gauss;
pub mod harness;
pub mod meta;
pub mod mpc;

pub use error::{Error, Result};
