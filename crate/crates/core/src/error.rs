use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter {theta:?} lies outside the domain of {family}")]
    Domain { family: String, theta: Vec<f64> },

    #[error("log-likelihood is not finite at {theta:?}")]
    Evaluation { theta: Vec<f64> },

    #[error("derivative order {0} is not supported (expected 1..=4)")]
    Order(usize),

    #[error("sample of size {n} is too small for a {dim}-parameter model (need at least {needed})")]
    SampleSize { n: usize, dim: usize, needed: usize },

    #[error("matrix is singular: leading principal minor of size {minor} vanishes")]
    Singular { minor: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("maximisation did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        trajectory: Vec<Vec<f64>>,
    },

    #[error("terminal point {theta:?} is a saddle: Hessian is not negative definite")]
    Saddle { theta: Vec<f64> },

    #[error("constrained maximisation failed at psi = {psi}: {reason}")]
    Constrained { psi: f64, reason: String },

    #[error("constrained maximiser escaped to the parameter boundary at psi = {psi}")]
    Boundary { psi: f64 },

    #[error("likelihood ratio statistic W = {w:e} at psi = {psi} is negative beyond round-off")]
    Inconsistent { psi: f64, w: f64 },

    #[error("profile curvature check failed: closed form {closed}, finite difference {numeric}")]
    ProfileCheck { closed: f64, numeric: f64 },

    #[error("nuisance Hessian block is not negative definite at psi = {psi}")]
    Curvature { psi: f64 },

    #[error("missing input: {0}")]
    Missing(&'static str),

    #[error("quadrature self-check failed: {0}")]
    Quadrature(String),

    #[error("root bracket failure: {0}")]
    Bracket(String),

    #[error("finite-difference stencil leaves the parameter domain at {theta:?}")]
    Stencil { theta: Vec<f64> },

    #[error("fitted configuration violates the likelihood equations: {0}")]
    FitQuality(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("experiment integrity failure: {0}")]
    Integrity(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
