//! Experiment runner for the federated simulation engine: config parsing,
//! the end-to-end round loop, metrics logging, and plot-data export.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod model_io;
pub mod runner;
