//! Batch experiment runner for federated Ψ-Net simulations: config files,
//! strategy comparisons with paired seeds, parameter sweeps, CSV metrics
//! and feature-map exports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::HarnessError;
pub use experiment::{run_experiment, ExperimentSummary, StrategySummary};

pub type Result<T> = std::result::Result<T, HarnessError>;
