//! Command-line harness around `soc_core`: corpus generation, occlusion
//! sample collection, dictionary training, classification, ROC and
//! dictionary-size sweeps.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod pipeline;

use soc_core::SocError;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<SocError> for CliError {
    fn from(e: SocError) -> Self {
        match e {
            SocError::InvalidConfig(m) => CliError::Usage(m),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
