//! Visual feature encoders.
//!
//! An [`Encoder`] turns a preprocessed `3 × R × R` tensor into an L2-normalized
//! feature vector. Backends are described by an [`EncoderManifest`]; ids of the
//! form `mock-<seed>` resolve to the built-in [`MockEncoder`] without any registry
//! entry.

mod mock;
#[cfg(feature = "onnx")]
mod onnx;
mod preprocess;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::vector::FeatureVector;

pub use mock::MockEncoder;
#[cfg(feature = "onnx")]
pub use onnx::OnnxEncoder;
pub use preprocess::{load_rgb, preprocess};

/// CLIP's published RGB normalization constants.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

pub const MOCK_RESOLUTION: u32 = 32;
pub const MOCK_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub backend_id: String,
    pub input_resolution: u32,
    pub feature_dim: usize,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_artifact_path: Option<PathBuf>,
    /// Hex SHA-256 of the model artifact.
    #[serde(default)]
    pub content_hash: String,
}

impl EncoderManifest {
    pub fn mock(seed: u64) -> Self {
        let backend_id = format!("mock-{seed}");
        let content_hash = hex::encode(Sha256::digest(backend_id.as_bytes()));
        Self {
            backend_id,
            input_resolution: MOCK_RESOLUTION,
            feature_dim: MOCK_FEATURE_DIM,
            channel_mean: CLIP_MEAN,
            channel_std: CLIP_STD,
            model_artifact_path: None,
            content_hash,
        }
    }

    pub fn mock_seed(&self) -> Option<u64> {
        self.backend_id.strip_prefix("mock-")?.parse().ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.input_resolution == 0 {
            return Err(CoreError::domain(format!(
                "encoder `{}` must have positive feature_dim and input_resolution",
                self.backend_id
            )));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::domain("channel_std entries must be positive"));
        }
        Ok(())
    }

    /// Checks the artifact on disk against `content_hash`.
    pub fn verify_artifact(&self) -> Result<PathBuf> {
        let path = self.model_artifact_path.as_ref().ok_or_else(|| {
            CoreError::Artifact(format!("encoder `{}` has no model artifact path", self.backend_id))
        })?;
        let bytes = fs::read(path)
            .map_err(|e| CoreError::Artifact(format!("cannot read {}: {e}", path.display())))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if !self.content_hash.is_empty() && !digest.eq_ignore_ascii_case(&self.content_hash) {
            return Err(CoreError::Artifact(format!(
                "{} has sha256 {digest}, manifest expects {}",
                path.display(),
                self.content_hash
            )));
        }
        Ok(path.clone())
    }
}

/// JSON registry of known backends, e.g. `encoders.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderRegistry {
    pub backends: Vec<EncoderManifest>,
}

impl EncoderRegistry {
    /// Loads the registry; a missing file is an empty registry.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut reg: EncoderRegistry = serde_json::from_slice(&fs::read(path)?)?;
        // Relative artifact paths are relative to the registry file.
        if let Some(dir) = path.parent() {
            for m in &mut reg.backends {
                if let Some(p) = &m.model_artifact_path {
                    if p.is_relative() {
                        m.model_artifact_path = Some(dir.join(p));
                    }
                }
            }
        }
        Ok(reg)
    }

    pub fn resolve(&self, backend_id: &str) -> Result<EncoderManifest> {
        if let Some(m) = self.backends.iter().find(|m| m.backend_id == backend_id) {
            m.validate()?;
            return Ok(m.clone());
        }
        backend_id
            .strip_prefix("mock-")
            .and_then(|s| s.parse::<u64>().ok())
            .map(EncoderManifest::mock)
            .ok_or_else(|| CoreError::UnknownBackend(backend_id.to_owned()))
    }
}

pub trait Encoder: Send + Sync {
    fn manifest(&self) -> &EncoderManifest;

    /// Encodes a `3 × R × R` tensor into a unit-norm feature of length `feature_dim`.
    fn encode(&self, input: &Array3<f32>) -> Result<FeatureVector>;

    fn check_input(&self, input: &Array3<f32>) -> Result<()> {
        let r = self.manifest().input_resolution as usize;
        if input.shape() != [3, r, r] {
            return Err(CoreError::domain(format!(
                "encoder `{}` expects a 3x{r}x{r} tensor, got {:?}",
                self.manifest().backend_id,
                input.shape()
            )));
        }
        Ok(())
    }
}

/// Instantiates the backend described by `manifest`.
pub fn open_encoder(manifest: &EncoderManifest) -> Result<Box<dyn Encoder>> {
    manifest.validate()?;
    if let Some(seed) = manifest.mock_seed() {
        return Ok(Box::new(MockEncoder::with_manifest(seed, manifest.clone())));
    }
    open_artifact(manifest)
}

#[cfg(feature = "onnx")]
fn open_artifact(manifest: &EncoderManifest) -> Result<Box<dyn Encoder>> {
    Ok(Box::new(OnnxEncoder::load(manifest.clone())?))
}

#[cfg(not(feature = "onnx"))]
fn open_artifact(manifest: &EncoderManifest) -> Result<Box<dyn Encoder>> {
    Err(CoreError::Artifact(format!(
        "backend `{}` needs an ONNX model but this build lacks the `onnx` feature",
        manifest.backend_id
    )))
}
