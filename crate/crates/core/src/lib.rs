//! Maximum-likelihood drift estimation for scalar SDEs driven by small
//! additive fractional Brownian motion, with a Monte Carlo study harness.

pub mod asymptotics;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fbm;
pub mod fraccalc;
pub mod grid;
pub mod likelihood;
pub mod model;
pub mod quad;

pub use error::{Error, Result};
pub use fbm::{HurstIndex, RngSeed};
pub use grid::{SampledPath, TimeGrid};
