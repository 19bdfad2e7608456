//! Experiment harness: data, configuration, replicated runs and diagnostics.

pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod kde;
pub mod series;
pub mod stats;

pub use config::ExperimentConfig;
pub use experiment::{resolve_data, run_experiment, write_artifacts, EnsembleSummary, ExperimentOutcome};
pub use series::{generate_data, GenerateSpec, ObservationSeries};
