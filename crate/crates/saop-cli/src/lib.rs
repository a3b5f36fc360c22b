//! Library half of the `saop` command-line tool: strict config parsing and
//! the run / multirun / verify entry points, kept callable for integration
//! tests.

pub mod config;
pub mod runner;

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments; exit status 2.
    Config(String),
    /// Runtime failure (integration, IO, non-convergence); exit status 1.
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Run(msg) => write!(f, "run error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_status(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    /// Machine-readable form printed to stdout on failure.
    pub fn to_json(&self) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Run(_) => "run",
        };
        let detail = match self {
            CliError::Config(m) | CliError::Run(m) => m,
        };
        serde_json::json!({ "error": kind, "detail": detail }).to_string()
    }
}
