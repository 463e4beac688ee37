//! Experiment orchestration for the quadruped lab: layered configuration,
//! write-once run directories with manifests, and the pipeline stages.

pub mod config;
pub mod manifest;
pub mod stages;

use std::fmt;

pub use config::{resolve, LabConfig, Overrides, Preset};
pub use manifest::RunManifest;
pub use stages::{run_stage, Stage};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    /// An artifact an earlier stage should have produced is absent.
    Missing(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing(_) => "missing-artifact",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Missing(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<quadlab::Error> for CliError {
    fn from(e: quadlab::Error) -> Self {
        match e {
            quadlab::Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv error: {e}"))
    }
}
