use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: parse failure: {message}")]
    Parse { row: usize, message: String },

    #[error("row {row}: {field} = {value} is outside [{min}, {max}]")]
    Bound {
        row: usize,
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("row {row}: timestamp {timestamp} does not increase over the previous row")]
    NonMonotone { row: usize, timestamp: i64 },

    #[error("trace {patient_id}: {len} samples cannot hold a window of {needed}")]
    TraceTooShort {
        patient_id: String,
        len: usize,
        needed: usize,
    },

    #[error("timestamp {t} lies outside the trace span [{start}, {end}]")]
    OutOfSpan { t: i64, start: i64, end: i64 },

    #[error("empty trace {0}")]
    EmptyTrace(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("{got} training windows, at least {needed} required")]
    InsufficientWindows { got: usize, needed: usize },

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("patient mismatch: expected {expected}, found {found}")]
    PatientMismatch { expected: String, found: String },

    #[error("empty risk profile for {0}")]
    EmptyProfile(String),

    #[error("clustering needs at least 2 profiles, got {0}")]
    TooFewProfiles(usize),

    #[error("expected a 2-cluster partition, got {0} clusters")]
    NonBinaryPartition(usize),

    #[error("no attack success rate for patient {0}")]
    MissingSuccessRate(String),

    #[error("detector training class `{0}` is empty")]
    EmptyClass(&'static str),

    #[error("k = {k} exceeds the {stored} stored points")]
    KTooLarge { k: usize, stored: usize },

    #[error("cohort of {needed} patients requested from {available}")]
    CohortTooSmall { needed: usize, available: usize },

    #[error("solver did not converge within {0} iterations")]
    NotConverged(usize),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing upstream artifact from stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
