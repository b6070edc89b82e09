use thiserror::Error;

use crate::geometry::RigidTransform;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input is too small (or too large) for the requested operation.
    #[error("size error: {0}")]
    Size(String),

    /// Shapes or layouts of the inputs do not agree.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite coordinates or values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// The cross-covariance is rank deficient. `best_effort` is the rotation
    /// the solver produced anyway; it is not unique.
    #[error("degenerate geometry: {reason}")]
    DegenerateGeometry {
        reason: String,
        best_effort: Box<RigidTransform>,
    },

    /// Two singular values are (nearly) equal, so the rotation is not
    /// differentiable. Callers should fall back to a stop-gradient solve.
    #[error("degenerate spectrum (gap {gap:.3e} < {threshold:.0e}); use the stop-gradient fallback")]
    DegenerateSpectrum { gap: f64, threshold: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
