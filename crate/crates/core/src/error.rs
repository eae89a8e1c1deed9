use thiserror::Error;

#[derive(Debug, Error)]
pub enum SttsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("constant series {0}: standard deviation is zero")]
    ConstantSeries(String),
    #[error("missing value in series {series} at timestamp {timestamp}")]
    MissingValue { series: String, timestamp: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("fill error: {0}")]
    Fill(String),
}

impl SttsError {
    /// Stable short identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            SttsError::Io { .. } => "io",
            SttsError::Parse(_) => "parse",
            SttsError::ConstantSeries(_) => "constant_series",
            SttsError::MissingValue { .. } => "missing_value",
            SttsError::Invalid(_) => "invalid",
            SttsError::Config(_) => "config",
            SttsError::Numerical(_) => "numerical",
            SttsError::Diverged { .. } => "diverged",
            SttsError::Checkpoint(_) => "checkpoint",
            SttsError::Fill(_) => "fill",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SttsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SttsError>;
