use thiserror::Error;

pub type Result<T> = std::result::Result<T, CollapseError>;

/// Errors produced by the collapse pipeline.
///
/// Variants split into two families: invalid input (bad shapes, bad
/// parameters, malformed files) and numerical failure (divergence,
/// non-convergence, singular systems). [`CollapseError::is_numerical`]
/// tells them apart.
#[derive(Debug, Error)]
pub enum CollapseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "precision matrix is not positive-definite (smallest eigenvalue {smallest_eigenvalue:.6e})"
    )]
    NotPositiveDefinite { smallest_eigenvalue: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate mask: row {row} is all zero")]
    DegenerateMask { row: usize },

    #[error("non-finite gradient for target {target}, entry {entry}")]
    NonFiniteGradient { target: usize, entry: usize },

    #[error("training diverged at epoch {epoch}: loss {loss:.6e} exceeds {limit:.6e}")]
    Diverged { epoch: usize, loss: f64, limit: f64 },

    #[error("did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed data: {0}")]
    Malformed(String),
}

impl CollapseError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CollapseError::Singular(_)
                | CollapseError::NonFiniteGradient { .. }
                | CollapseError::Diverged { .. }
                | CollapseError::NotConverged { .. }
        )
    }
}
