//! Variance of mini-batch SGD gradient estimators as a function of the batch
//! size: exact second-moment propagation for least squares, Gaussian moment
//! expansion for two-layer linear teacher–student networks, and a seeded
//! Monte Carlo harness that checks both.

pub mod cb_poly;
pub mod data;
pub mod error;
pub mod numeric;
pub mod regression;
pub mod terms;
pub mod wick;
pub mod two_layer;
pub mod mc;
pub mod polyfit;
pub mod cli;

pub use error::{Error, Result};
