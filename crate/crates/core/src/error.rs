use thiserror::Error;

pub type Result<T> = std::result::Result<T, MpdError>;

#[derive(Debug, Error)]
pub enum MpdError {
    #[error("numerical blow-up at step {step}")]
    NumericalBlowup { step: usize },

    /// A positivity-constrained state left its domain. Samplers treat this as a rejection.
    #[error("state left the model domain at step {step}")]
    DomainExit { step: usize },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate importance weights (effective sample size {ess:.3})")]
    DegenerateWeights { ess: f64 },

    #[error("no draw accepted after {cap} proposals")]
    MaxProposalsExceeded { cap: u64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate sample: standard deviation is zero")]
    DegenerateSample,

    #[error("model contract violated: {0}")]
    Model(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: missing or unexpected column `{column}`")]
    Schema { column: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("iteration {k}: {source}")]
    AtIteration {
        k: usize,
        #[source]
        source: Box<MpdError>,
    },

    #[error("{aborted} of {total} replications aborted")]
    TooManyAborts { aborted: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MpdError {
    pub fn at_iteration(self, k: usize) -> Self {
        MpdError::AtIteration {
            k,
            source: Box::new(self),
        }
    }

    /// Strips iteration context.
    pub fn root(&self) -> &MpdError {
        match self {
            MpdError::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}
