use std::fmt::Display;
use std::path::{Path, PathBuf};

use dxloop_core::error::{CohortError, PolicyError};
use dxloop_core::Error;
use thiserror::Error;

/// Command failures, split by whether the caller or the run is at fault.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact {}; run `dxloop {produced_by}` with the same --out first", path.display())]
    MissingArtifact { path: PathBuf, produced_by: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for anything the caller can fix by changing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact { .. } | CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// An input file that exists but cannot be used.
    pub fn artifact(path: &Path, e: impl Display) -> Self {
        CliError::Invalid(format!("{}: {e}", path.display()))
    }

    pub fn runtime(path: &Path, e: impl Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(path, e)
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        Error::from(e).into()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let invalid = match &e {
            Error::Domain(_) | Error::Label(_) | Error::Invalid(_) => true,
            Error::Cohort(c) => !matches!(c, CohortError::Io(_)),
            Error::Policy(p) => matches!(p, PolicyError::InvalidCapability | PolicyError::Domain(_)),
            _ => false,
        };
        if invalid {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}
