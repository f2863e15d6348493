use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "effective sample size {ess:.1} is below 1% of the {proposals} proposals; \
         increase the proposal count"
    )]
    LowEffectiveSampleSize { ess: f64, proposals: usize },

    #[error("{solver} diverged for covariance mode {mode} at iteration {iteration}")]
    SolverDiverged {
        solver: &'static str,
        mode: String,
        iteration: usize,
    },

    #[error("posterior chain for record {record} failed: {source}")]
    Chain {
        record: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves (divergence,
    /// indefiniteness, starved importance weights) rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::LowEffectiveSampleSize { .. }
            | Error::SolverDiverged { .. } => true,
            Error::Chain { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
