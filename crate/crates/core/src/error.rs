use thiserror::Error;

/// Errors across the pipeline. Warnings (short warmup, skewed group sizes,
/// degenerate scaling columns) are logged, not raised.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}` in trips CSV header")]
    MissingColumn(String),

    #[error("no cycles after filtering")]
    NoCyclesAfterFilter,

    #[error("unit `{unit_id}` rejected: {reason}")]
    UnitRejected { unit_id: String, reason: String },

    #[error("need at least 2 units for max-min scaling, got {0}")]
    TooFewUnits(usize),

    #[error("feature matrix must be max-min scaled before {op}")]
    Unscaled { op: &'static str },

    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("treatment indicator must contain both a 0 and a 1")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("requested {k} posterior draws but only {available} are available")]
    NotEnoughDraws { k: usize, available: usize },

    #[error(
        "cannot 1:1 match without replacement: {n_control} controls < {n_treated} treated"
    )]
    MatchInfeasible { n_control: usize, n_treated: usize },

    #[error("no matched pairs to analyse")]
    EmptyPairs,

    #[error("variational loss became non-finite at step {step}")]
    ViDiverged { step: usize },

    #[error(
        "could not hit the requested group counts after {rounds} rejection rounds; \
         try weaker assignment coefficients"
    )]
    CountsUnreachable { rounds: usize },

    #[error("malformed draws file: {0}")]
    MalformedDraws(String),

    #[error("malformed features file: {0}")]
    MalformedFeatures(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
