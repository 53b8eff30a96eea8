use std::fmt;
use std::path::PathBuf;

use thiserror::Error;
use vizproto_core::CoreError;

use crate::imagegen::GenError;
use crate::promptgen::LlmError;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// One missing input discovered while validating a run.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AssetGap {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
    pub missing: String,
}

impl fmt::Display for AssetGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.class_id {
            Some(c) => write!(f, "{}/{}: {}", self.dataset_id, c, self.missing),
            None => write!(f, "{}: {}", self.dataset_id, self.missing),
        }
    }
}

fn list_gaps(gaps: &[AssetGap]) -> String {
    gaps.iter().map(|g| format!("\n  - {g}")).collect()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error("{} missing asset(s):{}", .0.len(), list_gaps(.0))]
    MissingAssets(Vec<AssetGap>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("self-consistency check failed: {0}")]
    Inconsistent(String),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Json { path, source }
    }

    /// Process exit code: 2 for validation and asset gaps, 3 for external services.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Llm(_) | PipelineError::Generation(_) => 3,
            PipelineError::MissingAssets(_)
            | PipelineError::NotFound(_)
            | PipelineError::Invalid(_)
            | PipelineError::Core(CoreError::EmptyPrototype { .. })
            | PipelineError::Core(CoreError::UnknownBackend(_))
            | PipelineError::Core(CoreError::Domain(_)) => 2,
            _ => 1,
        }
    }
}
