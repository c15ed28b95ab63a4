//! Portfolio-warmstarted Bayesian optimization for data-driven MPC.
//!
//! The crate covers the whole offline pipeline: benchmark simulators and
//! trajectory datasets, one-step dynamics models with a cross-validated
//! score, a random-forest Bayesian optimizer over conditional configuration
//! spaces, greedy portfolio construction from meta datasets, a CEM model
//! predictive controller, and the statistics used to compare runs.

pub mod configspace;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod portfolio;
pub mod report;
pub mod rng;
pub mod sysid;
pub mod tuner;

pub use error::{Error, Result};
