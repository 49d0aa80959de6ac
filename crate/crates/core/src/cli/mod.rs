//! Configuration, experiment runner and CSV output for the `batchvar` binary.

pub mod config;
pub mod plot;
pub mod runner;
