use std::path::PathBuf;

/// Broad error families. The CLI maps each family to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    InvalidInput,
    Io,
    MissingData,
    Diverged,
    Fit,
    Decomposition,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid channel schema: {0}")]
    InvalidSchema(String),

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("normalization statistics for channel `{channel}` have non-positive std {std}")]
    ZeroStd { channel: String, std: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("truth data missing at timestamp {timestamp} h")]
    MissingTruth { timestamp: i64 },

    #[error("rollout from IC {ic_timestamp} h diverged at lead {lead_hours} h")]
    Diverged { ic_timestamp: i64, lead_hours: u32 },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("quadratic fit has no interior minimum (curvature {curvature:e})")]
    NoInteriorMinimum { curvature: f64 },

    #[error("zero variance in log covariate; slope undefined")]
    ZeroCovariateVariance,

    #[error("non-positive value {value} where a logarithm is required")]
    NonPositive { value: f64 },

    #[error("indivisible decomposition along {dim}: {detail}")]
    Indivisible { dim: &'static str, detail: String },

    #[error("shift ({s_h}, {s_w}) out of range for a {h}x{w} patch grid")]
    ShiftOutOfRange {
        s_h: i64,
        s_w: i64,
        h: usize,
        w: usize,
    },

    #[error("halo width {halo} exceeds neighbour interior {interior} along {dim}")]
    HaloTooWide {
        dim: &'static str,
        halo: usize,
        interior: usize,
    },

    #[error("checksum mismatch for {path}: header says {expected}, payload hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("join failure: {0}")]
    Join(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            InvalidGrid(_)
            | InvalidSchema(_)
            | Mismatch(_)
            | NonFinite { .. }
            | ZeroStd { .. }
            | InvalidConfig(_)
            | NonPositive { .. } => ErrorFamily::InvalidInput,
            MissingTruth { .. } => ErrorFamily::MissingData,
            Diverged { .. } => ErrorFamily::Diverged,
            TooFewPoints { .. } | NoInteriorMinimum { .. } | ZeroCovariateVariance | Join(_) => {
                ErrorFamily::Fit
            }
            Indivisible { .. } | ShiftOutOfRange { .. } | HaloTooWide { .. } => {
                ErrorFamily::Decomposition
            }
            Checksum { .. } | Io { .. } | Json(_) | Csv(_) => ErrorFamily::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
