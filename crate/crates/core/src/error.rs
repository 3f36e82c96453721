use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row {row} has (near-)zero norm")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("max-sim trace does not match inputs: {0}")]
    TraceMismatch(String),

    #[error("alignment plan does not match teacher matrix: {0}")]
    PlanMismatch(String),

    #[error("length mismatch: teacher has {teacher} entries, student has {student}")]
    LengthMismatch { teacher: usize, student: usize },

    #[error("matched position set is empty")]
    EmptyMatchSet,

    #[error("matched position {position} is outside the {len} available rows")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("stage `{0}` requires a frozen teacher checkpoint")]
    MissingTeacher(String),

    #[error("stage `{stage}` cannot consume {data} data")]
    DataKindMismatch { stage: String, data: &'static str },

    #[error("teacher and student shapes differ: {0}")]
    IncompatibleModels(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid synthetic world spec: {0}")]
    InvalidSpec(String),

    #[error("synthetic world failed its self-check: {0}")]
    SelfCheck(String),

    #[error("retrieval index is empty")]
    EmptyIndex,

    #[error("encoder fingerprint mismatch: index built with {index}, encoder is {encoder}")]
    FingerprintMismatch { index: String, encoder: String },

    #[error("document `{doc_id}`: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown document id `{0}`")]
    UnknownDocument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint {path} is corrupt: header fingerprint {stored}, values hash to {actual}")]
    CorruptCheckpoint { path: PathBuf, stored: String, actual: String },

    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
