use thiserror::Error;

use crate::field::ComplexField;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only N = 1 and N = 2 are implemented")]
    UnsupportedDimension(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid potential: {0}")]
    InvalidSpec(String),

    #[error("point |x| = {norm} lies outside the validity radius {radius} of a growth term")]
    OutsideValidity { norm: f64, radius: f64 },

    #[error("kappa = {0} is not in (0, 1]")]
    KappaOutOfRange(f64),

    #[error("shooting failed: no bracketing event in [{lo}, {hi}]")]
    Shooting { lo: f64, hi: f64 },

    #[error("{what} did not converge after {} iterations (last residual {:e})", .residuals.len(), .residuals.last().copied().unwrap_or(f64::NAN))]
    NoConvergence {
        what: &'static str,
        residuals: Vec<f64>,
    },

    #[error("blow-up suspected at t = {t}: field became non-finite")]
    BlowupSuspected {
        t: f64,
        last_finite: Box<ComplexField>,
    },

    #[error("profile of width {width} is not resolvable (minimum {min})")]
    Unresolvable { width: f64, min: f64 },

    #[error("root bracket failure: {0}")]
    Bracket(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("decomposition left the basin: {0}")]
    BasinLost(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidSpec(_)
                | Error::InvalidGrid(_)
                | Error::UnsupportedDimension(_)
                | Error::KappaOutOfRange(_)
                | Error::Json(_)
        )
    }
}
