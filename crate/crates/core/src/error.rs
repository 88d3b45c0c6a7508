use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("observation cutoff 1/h = {inv_h} exceeds the resolved band {max}")]
    CutoffTooLarge { inv_h: f64, max: f64 },

    #[error("observation cutoff mismatch: stream has 1/h = {stream}, config has 1/h = {config}")]
    CutoffMismatch { stream: f64, config: f64 },

    #[error("forcing band ({k_low}, {k_high}) is empty or outside the resolved modes")]
    EmptyBand { k_low: f64, k_high: f64 },

    #[error("numerical blow-up at step {step} (t = {t})")]
    BlowUp { step: u64, t: f64 },

    #[error("degenerate denominator in viscosity estimate (|denom| = {denom:e})")]
    DegenerateDenominator { denom: f64 },

    #[error("empty averaging window [{s}, {t}]")]
    EmptyWindow { s: f64, t: f64 },

    #[error("observation stream does not cover t = {t} (gap {gap})")]
    ObservationGap { t: f64, gap: f64 },

    #[error("window [{start}, {end}] exceeds the data horizon {horizon}")]
    WindowBeyondHorizon { start: f64, end: f64, horizon: f64 },

    #[error("viscosities must differ to form a difference quotient")]
    EqualViscosities,

    #[error("trajectory is not sampled at every time step: {0}")]
    TrajectoryGap(String),

    #[error("at least {needed} items required, got {got}")]
    TooFew { needed: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error in key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed snapshot file: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
