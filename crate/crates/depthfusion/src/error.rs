use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] depthfusion_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<AppError>,
    },
    #[error("acceptance failure: {0}")]
    Check(String),
}

impl AppError {
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Core(e) => e.kind(),
            AppError::Io(_) => "io",
            AppError::Format(_) => "format",
            AppError::Config(_) => "config",
            AppError::Stage { source, .. } => source.kind(),
            AppError::Check(_) => "check",
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        AppError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// Outermost stage tag, falling back to a `[stage]` prefix set by the core pipeline.
    pub fn stage(&self) -> Option<String> {
        match self {
            AppError::Stage { stage, .. } => Some(stage.clone()),
            AppError::Core(e) => {
                let msg = e.to_string();
                let inner = msg.split_once(": ").map_or(msg.as_str(), |(_, m)| m);
                let tagged = inner.strip_prefix('[').or_else(|| msg.strip_prefix('['))?;
                tagged.split_once(']').map(|(s, _)| s.to_string())
            }
            _ => None,
        }
    }

    /// Machine-readable body printed on failure.
    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind().to_string(),
            stage: self.stage(),
            message: self.to_string(),
        }
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Format(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Format(e.to_string())
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, AppError>;
