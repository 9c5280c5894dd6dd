//! Mean-field rough differential equations on sampled Gaussian drivers: grid lifts,
//! empirical controls, particle schemes, Wasserstein rates and the experiment harness.

pub mod coeff;
pub mod driver;
pub mod error;
pub mod experiments;
pub mod lift;
pub mod measure;
pub mod seed;
pub mod solver;
pub mod variation;

pub use error::{Error, Result};
