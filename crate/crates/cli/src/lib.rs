//! Experiment harness for the two groundwater case studies.
//!
//! [`config`] resolves presets and JSON overrides, [`cases`] builds the
//! reference truth, observations, prior and forward model of each case, and
//! [`experiment`] runs an assimilation and writes metrics and plot tables.

pub mod cases;
pub mod config;
pub mod experiment;

pub use cases::{build_case, build_case1, build_case2, Case, CaseTruth};
pub use config::{resolve, ExperimentConfig, Preset, SeedBundle};
pub use experiment::{metrics, read_summary, run, SummaryRow};
