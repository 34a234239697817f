//! Library side of the `ocreplay` binary: config resolution, dataset
//! assembly and the subcommands, so tests can drive them directly.

pub mod app;
pub mod commands;
pub mod config;
pub mod data;
pub mod output;

use std::fmt;

pub use config::{DatasetKind, Overrides, RunConfig};

/// Exit code 2 for bad invocations and configs, 1 for failures at run time.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => {
                // Library errors already embed their source text.
                let mut shown = e.to_string();
                f.write_str(&shown)?;
                for cause in e.chain().skip(1) {
                    let text = cause.to_string();
                    if !shown.contains(&text) {
                        write!(f, ": {text}")?;
                        shown = text;
                    }
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ocreplay::Error> for CliError {
    fn from(e: ocreplay::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
