//! Command-line harness around the `ppga` crate: layered configuration,
//! run directories with metrics and checkpoints, corrected archives, CDF
//! export and N1/N2 sweeps.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] ppga::ppga::PpgaError),
    #[error(transparent)]
    Archive(#[from] ppga::archive::ArchiveError),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Run(ppga::ppga::PpgaError::Config(_)) => 2,
            _ => 3,
        }
    }
}
