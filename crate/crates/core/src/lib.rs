//! Covariate-adjusted fold-difference estimation for multivariate
//! nonnegative outcomes, with cross-fitted nuisance ensembles, targeted and
//! one-step estimators, and simultaneous inference.

pub mod adjusted;
pub mod centering;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod glm;
pub mod inference;
pub mod learners;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sim;
pub mod unadjusted;

pub use error::{Error, Result};
