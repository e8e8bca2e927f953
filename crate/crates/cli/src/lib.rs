//! Library behind the `dna` binary: config loading and the four pipeline
//! commands. Each command reads and writes plain files so stages can be
//! rerun independently.

pub mod commands;
pub mod config;
pub mod store;

pub use config::RunConfig;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration or usage (exit 2).
    Config(String),
    /// Anything that fails while doing the work (exit 1).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<dna_core::Error> for CliError {
    fn from(e: dna_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
