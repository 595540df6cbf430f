//! Experiment front end: data generation, training runs, checkpoint
//! evaluation and parameter sweeps driven by a TOML manifest.

pub mod commands;
pub mod error;
pub mod manifest;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_run, cmd_sweep, run_trial, Experiment, RunOutput, SummaryRow,
    TrialResult,
};
pub use error::{CliError, Result};
pub use manifest::ExperimentManifest;
