//! Experiment runner for dissflow. Configs are TOML files; every run writes
//! plot-ready CSVs, monitor reports and a manifest holding the resolved
//! config and content hashes of all outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod check;
pub mod config;
pub mod error;
pub mod figures;
pub mod run;
pub mod stats;
pub mod sweep;

pub use config::{Axis, ExperimentConfig, Scenario};
pub use error::{CliError, Result};
pub use run::{simulate, CheckOutcome, RunSummary};
pub use sweep::{sweep, SweepReport};
