use thiserror::Error;

use crate::alloc::AllocError;
use crate::config::ConfigError;
use crate::env::EnvError;
use crate::net::ModelError;
use crate::nn::NnError;
use crate::ppo::PpoError;

/// Crate-level error; each variant maps onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 success, 2 config error, 3 artifact missing, 4 runtime infeasibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Alloc(AllocError::InfeasibleBudget { .. }) => 4,
            Error::Model(ModelError::InfeasibleLink { .. }) => 4,
            Error::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
