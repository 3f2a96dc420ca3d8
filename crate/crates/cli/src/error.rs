use facet_core::basis::BasisError;
use facet_core::bench::BenchError;
use facet_core::image::ImageError;
use facet_core::oracle::OracleError;
use facet_core::recovery::RecoveryError;
use facet_core::wire::WireError;
use thiserror::Error;

/// Process exit status: 0 ok, 1 other failure, 2 usage, 3 I/O, 4 budget.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Budget(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io(_) | ImageError::Format { .. } | ImageError::Truncated { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<BasisError> for CliError {
    fn from(e: BasisError) -> Self {
        match e {
            BasisError::Image(e) => e.into(),
            BasisError::Io(_)
            | BasisError::Format(_)
            | BasisError::Truncated { .. }
            | BasisError::UnsupportedVersion(_) => CliError::Io(e.to_string()),
            BasisError::Config(_) | BasisError::Input(_) | BasisError::Dimension { .. } => {
                CliError::Usage(e.to_string())
            }
            BasisError::Diverged { .. } | BasisError::DegenerateColumn(_) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::BudgetExhausted { .. } => CliError::Budget(e.to_string()),
            OracleError::Remote { status: 429, .. } => CliError::Budget(e.to_string()),
            OracleError::Transport(_) | OracleError::Remote { .. } => CliError::Io(e.to_string()),
            OracleError::UnknownIdentity(_)
            | OracleError::Geometry { .. }
            | OracleError::Config(_)
            | OracleError::Unsupported(_) => CliError::Usage(e.to_string()),
            OracleError::Degenerate(_) | OracleError::Length(..) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<RecoveryError> for CliError {
    fn from(e: RecoveryError) -> Self {
        match e {
            RecoveryError::Oracle(e) => e.into(),
            RecoveryError::Basis(e) => e.into(),
            RecoveryError::Config(_) | RecoveryError::Geometry { .. } => CliError::Usage(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Recovery(e) => e.into(),
            BenchError::Oracle(e) => e.into(),
            BenchError::Csv(_) | BenchError::Io(_) => CliError::Io(e.to_string()),
            BenchError::Empty | BenchError::Geometry { .. } | BenchError::Input(_) => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

impl From<WireError> for CliError {
    fn from(e: WireError) -> Self {
        CliError::Io(e.to_string())
    }
}
