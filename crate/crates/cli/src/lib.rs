//! Batch pipeline around `concord-core`: train fixture policies, compute
//! PDT tables, select models, evaluate rewards and compare oracles.

use std::path::{Path, PathBuf};

use concord_core::envs::EnvError;
use concord_core::selection::SelectionError;
use concord_core::VerifyError;

pub mod commands;
pub mod config;
pub mod store;

pub use commands::{cmd_compare, cmd_eval, cmd_pdt, cmd_select, cmd_train};
pub use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("oracle budget exhausted: {0}")]
    Budget(String),
    #[error(transparent)]
    Selection(SelectionError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error. Clap's usage errors exit with 2 as
    /// well.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Schema(_) => 4,
            CliError::Budget(_) => 5,
            CliError::Selection(_) => 6,
            CliError::Env(_) => 7,
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Verify(VerifyError::BudgetExhausted { .. }) => CliError::Budget(e.to_string()),
            SelectionError::Config(msg) => CliError::Config(msg),
            other => CliError::Selection(other),
        }
    }
}
