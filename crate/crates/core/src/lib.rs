//! Bayesian Fusion: sequential Monte Carlo for sampling the normalised product
//! of sub-posterior densities.

pub mod baselines;
pub mod bridge;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod model;
pub mod partition;
pub mod proposal;
pub mod rng;
pub mod smc;

pub use error::{FusionError, Result};
