//! Declarative experiments: configuration, orchestration and reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Issue, Method, OcoConfig, Tuner};
pub use run::{run_ablation, run_experiment, run_oco, run_trial, test_error};
