//! Experiment runner for corruption detection by gradient descent: dataset
//! files, configuration, repeated runs with aggregation, sweeps, and the
//! `cdgd` command line.

pub mod cli;
pub mod config;
pub mod emit;
pub mod error;
pub mod experiment;
pub mod io;

pub use config::{DatasetSpec, ExperimentConfig, MethodName, ModeSpec};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, sweep, AggregateReport, SweepAxis, SweepReport};
