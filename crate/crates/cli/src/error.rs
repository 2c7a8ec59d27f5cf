use std::path::PathBuf;

use shylab_core::certificates::{CertificateError, VerificationReport};
use shylab_core::dynamics::DynamicsError;
use shylab_core::montecarlo::MonteCarloError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const VERIFY_FAILED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("certificate infeasible: {0}")]
    Infeasible(CertificateError),
    #[error("verification failed: {reason}")]
    VerificationFailed { reason: String, report: Option<VerificationReport> },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    MonteCarlo(#[from] MonteCarloError),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Classify a certificate construction error: parameter problems are
    /// config errors, failed feasibility searches are infeasible.
    pub fn from_certificate(key: &str, e: CertificateError) -> Self {
        match e {
            CertificateError::NoFeasibleDelta { .. }
            | CertificateError::LocalizationFailure { .. }
            | CertificateError::CriterionRatioFailure { .. } => Self::Infeasible(e),
            other => Self::config(key, other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => exit::IO,
            Self::Dynamics(DynamicsError::Io(_)) => exit::IO,
            Self::Config { .. } | Self::Dynamics(_) | Self::MonteCarlo(_) => exit::CONFIG,
            Self::Infeasible(_) => exit::INFEASIBLE,
            Self::VerificationFailed { .. } => exit::VERIFY_FAILED,
        }
    }
}
