use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("degrees of freedom {df} too small for dimension {dim}")]
    DegreesOfFreedomTooSmall { df: f64, dim: usize },

    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),

    #[error("log density is not finite at x = {0}")]
    NonFiniteDensity(f64),

    #[error("slice sampler did not bracket the slice after {0} step-out expansions")]
    SliceStepOut(usize),

    #[error("design matrix is singular")]
    SingularDesign,

    #[error("unknown prior preset {0:?}")]
    UnknownPreset(String),

    #[error("chain has no kept draws")]
    EmptyChain,

    #[error("invalid experiment plan: {0}")]
    Plan(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Sampler { .. } => e,
            e => Error::Sampler {
                iteration,
                source: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
