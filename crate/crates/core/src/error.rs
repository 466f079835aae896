use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("step size underflow at t = {t}: state {state:?}")]
    StepFailure { t: f64, state: Vec<f64> },

    #[error("cutoff window does not cover the chart: sum of window translates is {coverage:e} at {point:?}")]
    CoverageFailure { point: Vec<f64>, coverage: f64 },

    #[error("hypothesis `{check}` violated: {violation:e} at {point:?}")]
    HypothesisViolation {
        check: String,
        violation: f64,
        point: Vec<f64>,
    },

    #[error("Newton iteration did not converge (last residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("singular Newton Jacobian near {point:?}")]
    SingularJacobian { point: Vec<f64> },

    #[error("degenerate orbit at l = {l}: |det(1 - P)| = {det:e} below threshold (base point {point:?})")]
    DegenerateOrbit { l: f64, det: f64, point: Vec<f64> },

    #[error("integrand of the primitive period did not vanish before |s| = {s}")]
    SupportEscape { s: f64 },

    #[error("fibre trace depends on the base point along the orbit: deviation {deviation:e}")]
    TIndependenceViolation { deviation: f64 },

    #[error("quadrature needs {nodes} nodes, budget is {budget}")]
    QuadratureBudgetExceeded { nodes: u128, budget: u128 },

    #[error("mollifier ladder is not converging: {values:?}")]
    NonConvergentLadder { values: Vec<f64> },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used in failure arrays of reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::StepFailure { .. } => "StepFailure",
            Error::CoverageFailure { .. } => "CoverageFailure",
            Error::HypothesisViolation { .. } => "HypothesisViolation",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::SingularJacobian { .. } => "SingularJacobian",
            Error::DegenerateOrbit { .. } => "DegenerateOrbit",
            Error::SupportEscape { .. } => "SupportEscape",
            Error::TIndependenceViolation { .. } => "TIndependenceViolation",
            Error::QuadratureBudgetExceeded { .. } => "QuadratureBudgetExceeded",
            Error::NonConvergentLadder { .. } => "NonConvergentLadder",
            Error::Parse { .. } => "ParseError",
            Error::Validation { .. } => "ValidationError",
            Error::Expr(_) => "ExpressionError",
            Error::Model(_) => "ModelError",
            Error::Io(_) => "IoError",
        }
    }
}
