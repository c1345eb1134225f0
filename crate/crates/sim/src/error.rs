use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config: {0}")]
    ConfigParse(String),
    #[error("{n} observations cannot be split evenly over {clusters} clusters")]
    NotDivisible { n: usize, clusters: usize },
    #[error("cluster {cluster} would have nonpositive size {size}")]
    NonpositiveSize { cluster: usize, size: i64 },
    #[error("within-cluster subsample of cluster {cluster} is empty")]
    EmptySubsample { cluster: usize },
    #[error("{0}")]
    Resample(String),
    #[error(transparent)]
    Core(#[from] crve::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn config_err(field: &str, message: impl Into<String>) -> SimError {
    SimError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}
