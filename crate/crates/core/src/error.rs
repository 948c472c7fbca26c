use thiserror::Error;

/// Errors raised by the solver, estimators and baselines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Array shapes of two inputs do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A linear system could not be solved.
    #[error("singular linear system: {0}")]
    Singular(String),

    /// The SGD inner loop produced a non-finite direction.
    #[error("SGD diverged at outer iteration {iteration}, step {step} (alpha = {alpha})")]
    Diverged {
        iteration: usize,
        step: usize,
        alpha: f64,
    },

    /// The linear program has no feasible point.
    #[error("linear program is infeasible: {0}")]
    Infeasible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than by the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::DimensionMismatch(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
