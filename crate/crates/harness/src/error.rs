use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration or command line; nothing was computed.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] psinet::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// The message without the category prefix.
    pub fn detail(&self) -> String {
        match self {
            HarnessError::Config(m) | HarnessError::Core(psinet::Error::Config(m)) => m.clone(),
            other => other.to_string(),
        }
    }

    /// 1 for configuration problems, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}
