//! Experiment orchestration for the teachnet laboratory.

pub mod config;
pub mod experiments;
pub mod output;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "TEACHNET_OUT";
