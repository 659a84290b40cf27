//! Experiment harness for channel pruning studies: configs, run
//! directories and the pipelines behind the `chanprune` binary.

pub mod config;
pub mod pipelines;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind};
