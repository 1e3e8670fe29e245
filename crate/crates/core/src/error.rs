use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} index {index} out of range (expected < {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { residual: f64, iterations: usize },

    /// The chain has no unique stationary distribution (reducible, or numerically so).
    #[error("chain has no unique stationary distribution: {0}")]
    SingularChain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{0} unavailable")]
    Unavailable(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn index(what: &'static str, index: usize, bound: usize) -> Self {
        Error::IndexOutOfRange { what, index, bound }
    }

    /// Wraps `self` with a description of the run that produced it.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        Error::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
