use crate::holding_cost::ValidationReport;

/// Unified error type for solver, simulation, and CLI failures.
///
/// Variants group into the failure classes the CLI maps to exit codes:
/// configuration problems, validation-gate refusals, numerical failures,
/// and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Model or cost parameters violate a structural requirement.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A holding-cost constructor rejected its input.
    #[error("invalid holding cost: {0}")]
    InvalidCost(String),

    /// The holding cost failed validation against the model and the solver
    /// refused to run (no override flag was set).
    #[error("holding cost rejected by validation ({} violation(s)); first: {}",
        .0.violations.len(),
        .0.violations.first().map(|v| v.check.as_str()).unwrap_or("none"))]
    Validation(ValidationReport),

    /// A precondition of a solver stage does not hold for the given inputs.
    #[error("infeasible input in {stage}: {detail}")]
    Infeasible { stage: String, detail: String },

    /// A numerical procedure failed to converge or bracket.
    #[error("numerical failure in {stage}: {detail}")]
    Numerics { stage: String, detail: String },

    /// The band linear system is singular or nearly so.
    #[error("degenerate band: {0}")]
    DegenerateBand(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration file is missing, malformed, or incomplete for the command.
    #[error("config error: {0}")]
    Config(String),

    /// Requested checks ran but did not meet their declared tolerances.
    #[error("stage check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerics(stage: &str, detail: impl Into<String>) -> Self {
        Error::Numerics {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn infeasible(stage: &str, detail: impl Into<String>) -> Self {
        Error::Infeasible {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }
}
