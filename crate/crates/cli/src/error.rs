use std::path::Path;

use loldu_core::adapter::AdapterError;
use loldu_core::harness::HarnessError;
use loldu_core::io::FormatError;
use loldu_core::linalg::LinalgError;
use loldu_core::optim::OptimError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A check ran and failed (exit 1).
    #[error("check failed: {0}")]
    Check(String),
    /// Numeric or domain failure (exit 2).
    #[error("{0}")]
    Domain(String),
    /// Unreadable, malformed or out-of-range input (exit 3).
    #[error("{0}")]
    Input(String),
    /// Invalid configuration (exit 4).
    #[error("configuration: {0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Domain(_) => 2,
            CliError::Input(_) => 3,
            CliError::Config(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::SingularPivot { .. } => CliError::Domain(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Linalg(inner) => inner.into(),
            AdapterError::InvalidState(_) => CliError::Domain(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::MissingBase => CliError::Domain(e.to_string()),
            FormatError::Adapter(inner) => inner.into(),
            FormatError::Linalg(inner) => inner.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            HarnessError::Divergence(_) => CliError::Domain(e.to_string()),
            HarnessError::IsolationViolated { .. } => CliError::Check(e.to_string()),
            HarnessError::Adapter(inner) => match inner {
                // Adapter construction inside a run fails only on config
                // choices such as an oversized rank.
                AdapterError::RankOutOfRange { .. } | AdapterError::InvalidAlpha(_) => {
                    CliError::Config(inner.to_string())
                }
                other => other.into(),
            },
            HarnessError::Linalg(inner) => inner.into(),
            HarnessError::Optim(inner) => inner.into(),
            HarnessError::Format(inner) => inner.into(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}
