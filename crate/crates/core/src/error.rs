use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    /// A request field failed validation.
    #[error("{field}: {message}")]
    InvalidField { field: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("undefined CTR for arm `{0}`: zero impressions")]
    UndefinedCtr(String),

    #[error("no embedding available for text {0:?}")]
    MissingEmbedding(String),

    /// Remote provider failed after all retries. Retrying later may succeed.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("solver did not converge after {sweeps} sweeps (last max update {last_update:e})")]
    NonConvergence { sweeps: usize, last_update: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("bundle checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("bundle format version {found} is not supported by this build (expected {expected}); retrain or migrate the bundle")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("not a model bundle: {0}")]
    BundleFormat(String),

    #[error("template error: {0}")]
    Template(String),

    /// Failure inside a named training stage.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's input rather than by the model,
    /// the environment, or a bug.
    pub fn is_invalid_input(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_invalid_input();
        }
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::InvalidField { .. }
                | Error::UndefinedCtr(_)
                | Error::MissingEmbedding(_)
        )
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
