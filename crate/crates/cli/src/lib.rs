//! Library half of the `lcr2s` binary: config resolution and subcommand
//! bodies, kept here so tests can drive them without spawning processes.

pub mod app;
pub mod commands;
pub mod config;
#[cfg(test)]
mod end_to_end;

use thiserror::Error;

pub use config::RunConfig;

/// Environment variable capping parallel work.
pub const THREADS_VAR: &str = "LCR2S_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lcr2s::Error),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("gradient check failed for: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 1 config or usage, 2 numeric, 3 i/o or format.
    pub fn exit_code(&self) -> u8 {
        use lcr2s::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheck(_) => 2,
            CliError::Core(e) => match e {
                E::Numeric(_) => 2,
                E::Format { .. } | E::Io { .. } => 3,
                E::Config(_)
                | E::Contract(_)
                | E::Dimension { .. }
                | E::Sampling(_)
                | E::Support(_) => 1,
            },
        }
    }
}

/// Parses a thread cap; unset means 1.
pub fn parse_threads(raw: Option<&str>) -> Result<usize, CliError> {
    match raw {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Core(lcr2s::Error::Config(format!(
                "{THREADS_VAR} must be a positive integer, got {s:?}"
            )))),
        },
    }
}

pub fn threads_from_env() -> Result<usize, CliError> {
    parse_threads(std::env::var(THREADS_VAR).ok().as_deref())
}
