use thiserror::Error;

use crate::formula::FormulaError;
use crate::identify::IdentifiabilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("unknown level `{level}` of factor `{factor}`")]
    UnknownLevel { factor: String, level: String },

    #[error("`{0}` is a covariate, a factor is required here")]
    NotAFactor(String),

    #[error("unit count mismatch: expected {expected}, found {found}")]
    UnitCountMismatch { expected: usize, found: usize },

    #[error("deleting level `{level}` of `{factor}` leaves no units")]
    EmptyRestriction { factor: String, level: String },

    #[error("non-finite value in covariate `{0}`")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid covariance model: {0}")]
    InvalidCovariance(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("{0} units are too few for a conditional positive-definiteness check of order {1}")]
    TooFewUnits(usize, usize),

    #[error("saturated mean model: no residual degrees of freedom")]
    Saturated,

    #[error("matrix is not positive definite on the contrast space")]
    NotPositiveDefinite,

    #[error("variance components are not identifiable: {}", .0.summary())]
    NotIdentifiable(Box<IdentifiabilityReport>),

    #[error("term `{term}` needs the mean model to contain {}", .required.join(", "))]
    MissingTrend { term: String, required: Vec<String> },

    #[error("degenerate response: residual sum of squares is zero")]
    DegenerateResponse,

    #[error("fit did not converge")]
    NotConverged,

    #[error("invalid new unit: {0}")]
    InvalidNewUnit(String),

    #[error("new unit row is not estimable under the mean model")]
    NotEstimable,

    #[error("`{0}` is not a block term of the fitted covariance model")]
    NotABlockTerm(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Formula(#[from] FormulaError),
}
