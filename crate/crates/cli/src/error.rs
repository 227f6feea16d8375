//! Error classification for exit codes and machine-parsable reporting.

use std::fmt;

/// A failure with its reporting category. Configuration and data problems
/// exit with code 2, estimation and output failures with code 3; every
/// error prints as a single `error[tag]: message` line on stderr.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Estimation(String),
    Io(String),
}

impl CliError {
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Estimation(_) => "estimation",
            CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Estimation(_) | CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Estimation(m)
            | CliError::Io(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // One line, machine-parsable prefix, human-readable text.
        let msg = self.message().replace('\n', "; ");
        write!(f, "error[{}]: {}", self.tag(), msg)
    }
}

impl From<cml_core::Error> for CliError {
    fn from(e: cml_core::Error) -> CliError {
        match e {
            cml_core::Error::Config(m) => CliError::Config(m),
            cml_core::Error::Data(m) => CliError::Data(m),
            cml_core::Error::Estimation(m) => CliError::Estimation(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
