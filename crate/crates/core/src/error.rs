use thiserror::Error;
use vpr_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum VprError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("sweep cell gamma={gamma} window={window} seed={seed}: {source}")]
    SweepCell {
        gamma: f64,
        window: usize,
        seed: u64,
        #[source]
        source: Box<VprError>,
    },
}

impl VprError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::SweepCell { source, .. } => source.is_validation(),
            _ => matches!(
                self,
                Self::Config(_) | Self::Dimension(_) | Self::UnknownMetric(_) | Self::Toml(_)
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, VprError>;
