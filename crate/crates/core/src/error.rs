use thiserror::Error;

/// Errors produced while building data structures or evaluating the model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid subject `{id}`: {reason}")]
    InvalidSubject { id: String, reason: String },

    #[error("invalid basis configuration: {0}")]
    InvalidBasis(String),

    #[error("basis index {u} out of range for m = {m}")]
    BasisIndex { u: usize, m: usize },

    #[error("knot placement needs at least {need} distinct values, found {found}")]
    TooFewDistinct { need: usize, found: usize },

    #[error("negative basis coefficient theta[{index}] = {value}")]
    NegativeTheta { index: usize, value: f64 },

    #[error(
        "log of a non-positive quantity ({context}) for subject `{id}`; the baseline \
         hazard is numerically zero over part of the observed range"
    )]
    LogOfNonPositive { id: String, context: &'static str },

    #[error(
        "multiplicative-iterative scaling denominator vanished at index {index} while \
         theta[{index}] > 0; the data carry no information about this basis function"
    )]
    DegenerateMiDenominator { index: usize },

    #[error("singular reduced information matrix; retained coordinates {coords:?}")]
    SingularInformation { coords: Vec<usize> },

    #[error(
        "negative asymptotic variance {value:.6e} for coefficient `{name}` \
         (active constraints: {active:?})"
    )]
    NegativeVariance {
        name: String,
        value: f64,
        active: Vec<usize>,
    },

    #[error("fit carries no covariance matrix: {0}")]
    MissingCovariance(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("model has no covariates (p + q = 0); nothing to estimate")]
    NoCovariates,

    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
