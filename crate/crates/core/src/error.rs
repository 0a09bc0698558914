use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid volume geometry: {0}")]
    Geometry(String),

    #[error("non-finite coordinate: {0:?}")]
    NonFinite(Vec<f64>),

    #[error("cannot normalize: {0}")]
    Normalization(&'static str),

    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),

    #[error("vertebrae {0} and {1} overlap")]
    Overlap(usize, usize),

    #[error("spine not found: no slice probability reaches {0}")]
    SpineNotFound(f64),

    #[error("empty probability slice at z index {0}")]
    EmptySlice(usize),

    #[error("invalid curve: {0}")]
    Curve(String),

    #[error("degenerate vertebra keypoints: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{0}")]
    SingleClass(&'static str),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
