//! Configuration-driven runs over `kimlab-core`: TOML configs in, CSV and
//! JSON artifacts plus a manifest out.

pub mod compare;
pub mod config;
pub mod error;
pub mod io;
pub mod runner;

pub use compare::{compare_runs, DiffReport};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{run_experiment, Manifest, RunOptions, RunReport, Stage};
