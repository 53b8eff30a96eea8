//! On-disk layout of a project directory.
//!
//! ```text
//! <root>/encoders.json                                 encoder registry
//! <root>/datasets/<dataset>/<class>/*.{png,jpg}        real images
//! <root>/prompts/<style>/<dataset>/<class>/<No.>.txt   prompt text, prompts.json sidecar
//! <root>/generated/<style>/<dataset>/<class>/<No.>.png generated image, <No.>.json sidecar
//! <root>/generated/<style>/<dataset>/manifest.json     generation manifest
//! <root>/cache/<dataset>/<backend>.pfc                 feature cache
//! <root>/prototypes/<dataset>/<backend>/<variant>.json persisted prototypes
//! <root>/runs/<run_id>/                                evaluation outputs
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PromptStyle;
use crate::error::{PipelineError, Result};

/// Replaces path separators and whitespace with `_`.
pub fn sanitize_name(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| if c == '/' || c == '\\' || c.is_whitespace() { '_' } else { c })
        .collect()
}

/// Whether `path` is a non-empty relative path made only of normal components, so it
/// cannot escape the directory it is joined onto.
pub fn is_contained(path: &Path) -> bool {
    use std::path::Component;
    path.components().next().is_some() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectLayout {
    root: PathBuf,
}

impl ProjectLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn encoder_registry(&self) -> PathBuf {
        self.root.join("encoders.json")
    }

    pub fn datasets_root(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn dataset_dir(&self, dataset: &str) -> PathBuf {
        self.datasets_root().join(sanitize_name(dataset))
    }

    pub fn prompt_root(&self, style: PromptStyle) -> PathBuf {
        self.root.join("prompts").join(style.as_str())
    }

    pub fn prompt_class_dir(&self, style: PromptStyle, dataset: &str, class_id: &str) -> PathBuf {
        self.prompt_root(style)
            .join(sanitize_name(dataset))
            .join(sanitize_name(class_id))
    }

    pub fn generated_root(&self, style: PromptStyle) -> PathBuf {
        self.root.join("generated").join(style.as_str())
    }

    pub fn generation_store(&self, style: PromptStyle, dataset: &str) -> PathBuf {
        self.generated_root(style).join(sanitize_name(dataset))
    }

    pub fn cache_file(&self, dataset: &str, backend_id: &str) -> PathBuf {
        self.root
            .join("cache")
            .join(sanitize_name(dataset))
            .join(format!("{}.pfc", sanitize_name(backend_id)))
    }

    pub fn prototype_file(&self, dataset: &str, backend_id: &str, variant: &str) -> PathBuf {
        self.root
            .join("prototypes")
            .join(sanitize_name(dataset))
            .join(sanitize_name(backend_id))
            .join(format!("{variant}.json"))
    }

    pub fn runs_root(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_root().join(sanitize_name(run_id))
    }
}

/// Writes `bytes` to `path` through a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(PipelineError::io(parent))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(PipelineError::io(&tmp))?;
    f.write_all(bytes).map_err(PipelineError::io(&tmp))?;
    f.sync_all().map_err(PipelineError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(PipelineError::io(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(PipelineError::json(path))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(PipelineError::io(path))?;
    serde_json::from_slice(&bytes).map_err(PipelineError::json(path))
}
