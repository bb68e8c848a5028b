use thiserror::Error;

/// Failures raised anywhere in the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates its documented invariant. `field` is the flat
    /// config key path, e.g. `bath.gamma`.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("quadrature did not converge at t = {t}: {reason}")]
    Quadrature { t: f64, reason: String },

    #[error("time grid too coarse: dt = {dt} exceeds the resolution bound {bound}")]
    GridResolution { dt: f64, bound: f64 },

    #[error("time {t} lies outside [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("two-time arguments must satisfy t1 >= t2 (got t1 = {t1}, t2 = {t2})")]
    TimeOrder { t1: f64, t2: f64 },

    #[error("integrator failed at t = {t}: {reason}")]
    Integrator { t: f64, reason: String },

    #[error("unphysical correlator |y1| = {value} at t1 = {t1} (t2 = {t2})")]
    Physicality { value: f64, t1: f64, t2: f64 },

    #[error("fit did not converge: {0}")]
    FitFailed(String),

    #[error("{0}")]
    Analysis(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by the user's input rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. } | Error::Config(_) | Error::GridResolution { .. }
        )
    }
}
