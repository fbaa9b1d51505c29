//! Marginal likelihoods of Gaussian mixture models from MCMC output using the
//! symmetric truncated harmonic mean estimator (THAMES).
//!
//! The pipeline is: [`sampler`] draws from the posterior, [`relabel`] removes
//! label switching, and [`thames::estimate`] builds the truncation set,
//! the ordering structure and the estimate. [`oracle`] provides exact and
//! closed-form reference values.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod ordering;
pub mod relabel;
pub mod sampler;
pub mod thames;

pub use error::{Error, Result};
