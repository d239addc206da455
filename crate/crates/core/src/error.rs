use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "point set is affinely rank-deficient (rank {rank} < dimension {dim}); \
         add jitter to the points or reduce the dimension"
    )]
    RankDeficient { rank: usize, dim: usize },

    #[error("need at least {needed} points for a {dim}-dimensional ellipsoid, got {got}")]
    TooFewPoints { needed: usize, dim: usize, got: usize },

    #[error("empty failure region set")]
    EmptyRegionSet,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("column {0} has zero variance; cannot standardize")]
    SingularStandardizer(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("no elite samples at level {level}: increase the quantile or samples per level")]
    NoElites { level: usize },

    #[error("all importance weights are zero")]
    ZeroWeights,

    #[error("unknown {kind} `{name}`; valid options: {valid}")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: &'static str,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{dir} is not a complete run directory; missing {missing} (expected {expected})")]
    MissingRunOutput {
        dir: String,
        missing: String,
        expected: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
