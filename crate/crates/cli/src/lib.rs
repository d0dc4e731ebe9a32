//! Command-line harness around `tembed-core`: diagnose, train, sweep and
//! solve, with JSON configs in and JSON/CSV reports out.
//!
//! Exit codes: 0 ok, 1 I/O failure, 2 config, 3 numeric, 4 divergence,
//! 5 stiffness.

pub mod commands;
pub mod config;
mod output;

pub use commands::{diagnose, solve, sweep, train, SolveCase, SolveOptions, SweepOptions, SweepParam, SweepRow};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_STIFFNESS: i32 = 5;

/// An error paired with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {err}", path.display()))
    }
}

impl From<tembed_core::Error> for CliError {
    fn from(e: tembed_core::Error) -> Self {
        use tembed_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Usage(_) => EXIT_CONFIG,
            E::Numeric(_) => EXIT_NUMERIC,
            E::Divergence { .. } => EXIT_DIVERGENCE,
            E::Stiffness { .. } => EXIT_STIFFNESS,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
