use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no policies")]
    NoPolicies,

    #[error("no policies written in year {0}")]
    EmptyYear(i32),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{rejected} of {total} rows rejected (more than half)")]
    TooManyRejects { rejected: usize, total: usize },

    #[error("cannot draw {requested} policies from a portfolio of {available}")]
    SubsetTooLarge { requested: usize, available: usize },

    #[error("unknown ordinal label `{label}`")]
    UnknownLabel { label: String },

    #[error("policy {id}: {reason}")]
    InvalidPolicy { id: String, reason: String },

    #[error("perfect separation on `{covariate}`")]
    Separation { covariate: String },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("logistic fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("level `{level}` of `{covariate}` was not seen when fitting")]
    UnseenLevel { covariate: String, level: String },

    #[error("covariate `{0}` has zero variance; set it to exact or ignore")]
    ZeroVariance(String),

    #[error("covariance matrix is singular even after ridge regularization")]
    SingularCovariance,

    #[error("no approximate-mode covariates to build a metric from")]
    NoApproximateCovariates,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    #[error("every target policy was dropped")]
    AllDropped,

    #[error("empty sample")]
    EmptySample,

    #[error("zero variance with unequal means")]
    DegenerateVariance,

    #[error("zero denominator in ratio contrast")]
    ZeroDenominator,

    #[error("premium for `{coverage}` must be strictly positive under a log link")]
    NonPositivePremium { coverage: String },

    #[error("policy {id} has no premium for coverage `{coverage}`")]
    MissingCoverage { id: String, coverage: String },

    #[error("link {link} cannot produce a {contrast} rate change that is the same for every policy")]
    LinkContrastMismatch {
        link: &'static str,
        contrast: &'static str,
    },

    #[error("fitted propensity of policy {id} is {p}, outside (0, 1)")]
    PropensityBounds { id: String, p: f64 },

    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("years {from}->{to}: {source}")]
    YearPair {
        from: i32,
        to: i32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NoPolicies | Error::EmptyYear(_) | Error::EmptySample => "empty",
            Error::Schema(_) | Error::MissingColumn(_) | Error::UnknownLabel { .. } => "schema",
            Error::Config(_) | Error::InvalidWeights(_) => "config",
            Error::Io { .. } | Error::Csv(_) => "io",
            Error::TooManyRejects { .. } | Error::InvalidPolicy { .. } => "data",
            Error::SubsetTooLarge { .. } => "subset",
            Error::Separation { .. }
            | Error::RankDeficient { .. }
            | Error::NotConverged { .. }
            | Error::UnseenLevel { .. }
            | Error::PropensityBounds { .. } => "model",
            Error::ZeroVariance(_)
            | Error::SingularCovariance
            | Error::NoApproximateCovariates
            | Error::DimensionMismatch { .. } => "metric",
            Error::AllDropped => "match",
            Error::DegenerateVariance => "balance",
            Error::ZeroDenominator
            | Error::NonPositivePremium { .. }
            | Error::MissingCoverage { .. }
            | Error::LinkContrastMismatch { .. } => "estimate",
            Error::BootstrapFailures { .. } => "bootstrap",
            Error::YearPair { source, .. } => source.kind(),
        }
    }
}
