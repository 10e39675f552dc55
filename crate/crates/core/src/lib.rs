//! Multiply-robust estimation of exposure-response curves for panels with a
//! universal intervention and no untreated locations, with spatially
//! correlated weighted-bootstrap confidence intervals.

pub mod bootstrap;
pub mod density;
pub mod error;
pub mod estimator;
pub mod forest;
pub mod frame;
pub mod learner;
pub mod llkr;
pub mod nuisance;
pub mod panel;
pub mod rng;
pub mod sim;
pub mod special;
pub mod stats;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tuning;
pub mod variogram;

pub use error::{AdtError, Result};
