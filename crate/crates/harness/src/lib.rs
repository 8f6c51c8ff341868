//! Experiment runner for `rlhf-kernel`: configuration, training loops,
//! metrics output and the `rlhf-kernel` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod runners;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use metrics::MetricsTable;
