use ndarray::Array3;
use tract_onnx::prelude::*;

use super::{Encoder, EncoderManifest};
use crate::error::{CoreError, Result};
use crate::vector::{normalize_wide, FeatureVector};

type Plan = std::sync::Arc<TypedRunnableModel>;

/// Image tower exported to ONNX, run with tract. Expects a single `1 × 3 × R × R`
/// float input and reads the first output as the embedding.
pub struct OnnxEncoder {
    manifest: EncoderManifest,
    plan: Plan,
}

fn artifact_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Artifact(e.to_string())
}

impl OnnxEncoder {
    pub fn load(manifest: EncoderManifest) -> Result<Self> {
        let path = manifest.verify_artifact()?;
        let r = manifest.input_resolution as usize;
        let plan = tract_onnx::onnx()
            .model_for_path(&path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, r, r]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(artifact_err)?;
        Ok(Self { manifest, plan })
    }
}

impl Encoder for OnnxEncoder {
    fn manifest(&self) -> &EncoderManifest {
        &self.manifest
    }

    fn encode(&self, input: &Array3<f32>) -> Result<FeatureVector> {
        self.check_input(input)?;
        let r = self.manifest.input_resolution as usize;
        let data: Vec<f32> = input.iter().copied().collect();
        let tensor = tract_ndarray::Array4::from_shape_vec((1, 3, r, r), data)
            .map_err(|e| CoreError::Inference(e.to_string()))?;
        let outputs = self
            .plan
            .run(tvec!(Tensor::from(tensor).into()))
            .map_err(|e| CoreError::Inference(e.to_string()))?;
        let view = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| CoreError::Inference(e.to_string()))?;
        let values: Vec<f64> = view.iter().map(|&v| f64::from(v)).collect();
        if values.len() != self.manifest.feature_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.manifest.feature_dim,
                actual: values.len(),
            });
        }
        normalize_wide(&values)
    }
}
