use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, lengths, missing record data).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("time {t} outside [0, {horizon}]")]
    Range { t: f64, horizon: f64 },

    #[error("exact trace needs {dim} vector-Jacobian products, above the guard of {guard}; use the Hutchinson estimator")]
    TraceGuard { dim: usize, guard: usize },

    #[error("non-finite state at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    Stiffness { t: f64, h: f64 },

    #[error("maximum number of steps ({0}) exceeded")]
    MaxSteps(usize),

    #[error("adjoint solve became unstable: {0}")]
    AdjointInstability(Box<Error>),

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::Stiffness { .. }
                | Error::MaxSteps(_)
                | Error::AdjointInstability(_)
                | Error::NonFiniteGradient(_)
        )
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
