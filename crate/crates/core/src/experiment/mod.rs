//! Experiment harness behind the command-line tool.

pub mod commands;
pub mod config;
pub mod output;
pub mod stats;
pub mod svg;

pub use commands::{gradcheck, landscape, reproduce_appendix_a, scaling, Criterion, Summary};
pub use config::ExperimentConfig;
