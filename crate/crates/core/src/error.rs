use std::path::PathBuf;

/// Errors produced anywhere in the simulation and analysis chain.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter violates a documented invariant or precondition.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// The integrator produced a NaN or infinite state.
    #[error("non-finite oscillator state at t = {t:e} s")]
    NonFinite { t: f64 },

    /// A stored trajectory would not fit the in-memory budget.
    #[error(
        "trajectory of {samples} samples exceeds the in-memory budget of {budget}; \
         use the streaming simulation instead"
    )]
    MemoryBudget { samples: u64, budget: u64 },

    /// Displacement shot floor is infinite (no light or no fringe contrast).
    #[error("shot-noise floor is infinite: {0}")]
    InfiniteFloor(&'static str),

    /// A record is too short for the requested spectral resolution.
    #[error(
        "record of {have:.6} s is too short for a resolution of {rbw} Hz; \
         at least {need:.6} s is required"
    )]
    RecordTooShort { have: f64, need: f64, rbw: f64 },

    /// Nonlinear least squares did not converge or the data has no resonance.
    #[error("Lorentzian fit failed after {iterations} iterations: {reason}")]
    Fit { iterations: usize, reason: String },

    /// Displacement calibration could not be established.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// An analysis could not be carried out on the supplied records.
    #[error("analysis `{stage}` failed: {reason}")]
    Analysis { stage: String, reason: String },

    /// A scenario document does not match the schema.
    #[error("scenario schema error: {0}")]
    Schema(String),

    /// An experiment stage failed; `source` carries the underlying error.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn analysis(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Analysis {
            stage: stage.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
