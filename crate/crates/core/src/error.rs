use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("gallery size {size} is not divisible by n1 = {n1}")]
    Divisibility { size: usize, n1: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fusion method {0} requires training statistics")]
    MissingStats(&'static str),

    #[error("missing soft-biometric attributes for subject {0}")]
    MissingAttributes(u64),

    #[error("odd number of elements ({0}) cannot be perfectly matched")]
    OddSize(usize),

    #[error("instance of size {size} exceeds the brute-force limit of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionMismatch(u16),

    #[error("truncated file")]
    Truncated,

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("no metadata for subject {subject_id} sample {sample_id}")]
    MetadataJoinMiss { subject_id: u64, sample_id: u64 },

    #[error("metadata: {0}")]
    Metadata(String),

    #[error("scheme mismatch: expected {expected}, found {found}")]
    SchemeMismatch { expected: String, found: String },

    #[error("key mismatch: template key {template:016x}, supplied key {supplied:016x}")]
    KeyMismatch { template: u64, supplied: u64 },

    #[error("secret key material is not available")]
    MissingSecret,

    #[error("template representation does not match scheme {0}")]
    Representation(String),

    #[error("probe of subject {0} is not enrolled")]
    NotEnrolled(u64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
