use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}, row {row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("manifest {path}: duplicate utt_id `{utt_id}`")]
    DuplicateUttId { path: PathBuf, utt_id: String },

    #[error("manifest {path}, row {row}: mos label {value} outside [1, 5]")]
    LabelOutOfRange {
        path: PathBuf,
        row: usize,
        value: f64,
    },

    #[error("unsupported wav format: {0}")]
    UnsupportedWav(String),

    #[error("malformed wav: {0}")]
    MalformedWav(String),

    #[error("feature file format: {0}")]
    FeatureFormat(String),

    #[error("invalid audio clip: {0}")]
    InvalidClip(String),

    #[error("invalid feature sequence: {0}")]
    InvalidFeatures(String),

    #[error("clip too short: {samples} samples, need at least {required}")]
    ClipTooShort { samples: usize, required: usize },

    #[error("invalid pitch range: {0}")]
    InvalidPitchRange(String),

    #[error("invalid fft size {fft_size}: {reason}")]
    InvalidFftSize { fft_size: usize, reason: String },

    #[error("non-positive frequency {0} Hz")]
    NonPositiveFrequency(f64),

    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("all-zero histogram has no sharpness")]
    EmptyHistogram,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("frame alignment: {0}")]
    Alignment(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("validation set has {0} system(s); system-level SRCC needs at least 2")]
    SingleSystem(usize),

    #[error("thresholds must satisfy 1 < beta < alpha < 5 (alpha = {alpha}, beta = {beta})")]
    InvalidThresholds { alpha: f64, beta: f64 },

    #[error("requested top {requested} predictors but only {available} available")]
    NotEnoughPredictors { requested: usize, available: usize },

    #[error("model file {path}, line {line}: {message}")]
    ModelFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(
        "member model {path} digest mismatch: fusion file expects {expected}, file has {actual}"
    )]
    StaleMember {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("utterance `{utt_id}`: {source}")]
    Utterance {
        utt_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_utterance(utt_id: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::Utterance {
            utt_id: utt_id.to_string(),
            source: Box::new(e),
        }
    }
}
