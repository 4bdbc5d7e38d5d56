use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or config key outside its domain. `key` names the offender.
    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("degenerate timestep: alpha_bar = {alpha_bar} (need 0 < alpha_bar < 1)")]
    DegenerateTimestep { alpha_bar: f64 },

    #[error("ill-posed exact update: |b|^2 = {norm_sq:e} is below the solver threshold")]
    IllPosed { norm_sq: f64 },

    #[error("scale schedule exhausted: requested step {step} of a {len}-entry schedule")]
    ScheduleLength { step: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
