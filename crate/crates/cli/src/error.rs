use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] dsui_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for bad input, 4 for undefined metrics, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Toml(_) => 2,
            CliError::Core(dsui_core::Error::Config(_)) => 2,
            CliError::Core(dsui_core::Error::UndefinedMetric(_)) => 4,
            _ => 3,
        }
    }
}
