use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("multistep coefficients sum to {sum}, expected 1")]
    CoefficientSum { sum: f64 },

    #[error("1 - D is singular, effective learning rate undefined")]
    SingularMemory,

    #[error("immediate divergence: nu = {nu} <= 1/2, sum of squared eigenvalues is infinite")]
    ImmediateDivergence { nu: f64 },

    #[error("R_lambda has a pole or sign change at lambda = {lam}: denominator {denominator}")]
    Pole { lam: f64, denominator: f64 },

    #[error("eigenvalue index {k} (lambda = {lam}) is outside the strict stability region: {reason}")]
    UnstableEigenvalue { k: usize, lam: f64, reason: String },

    #[error("trajectory diverged at step {step}")]
    Diverged { step: u64 },

    #[error("fit window [{lo}, {hi}] contains a non-positive or non-finite loss at t = {t}")]
    NonPositive { lo: u64, hi: u64, t: u64 },

    #[error("fit window [{lo}, {hi}] holds {n} usable points, need at least 2")]
    EmptyWindow { lo: u64, hi: u64, n: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
