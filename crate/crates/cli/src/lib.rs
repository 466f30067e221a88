//! Config-driven experiment runner for the `uaplab` core library.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{ExperimentConfig, Kind};
pub use experiments::{replay, run, validate, Diagnostic, RunError, Sidecars};
pub use report::{Check, ReportRecord};
