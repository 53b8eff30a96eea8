use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderManifest};
use crate::error::Result;
use crate::vector::{normalize_wide, FeatureVector};

const POOL_GRID: usize = 8;
/// Scale of the input-hash component relative to the projected component.
const HASH_JITTER: f64 = 0.05;

/// Deterministic stand-in for a neural encoder.
///
/// The tensor is average-pooled to an 8×8 grid per channel and multiplied by a fixed
/// Gaussian matrix drawn from `seed`, so visually similar inputs land close together.
/// A small Gaussian term seeded by a SHA-256 of the raw tensor bytes is added so that
/// distinct inputs never share a feature. Output is unit norm.
pub struct MockEncoder {
    manifest: EncoderManifest,
    seed: u64,
    grid: usize,
    projection: Vec<f32>,
}

impl MockEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_manifest(seed, EncoderManifest::mock(seed))
    }

    pub fn with_manifest(seed: u64, manifest: EncoderManifest) -> Self {
        let grid = POOL_GRID.min(manifest.input_resolution as usize);
        let inputs = 3 * grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..manifest.feature_dim * inputs)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            manifest,
            seed,
            grid,
            projection,
        }
    }

    fn pool(&self, input: &Array3<f32>) -> Vec<f64> {
        let r = input.shape()[1];
        let g = self.grid;
        let mut pooled = Vec::with_capacity(3 * g * g);
        for c in 0..3 {
            for gy in 0..g {
                let (y0, y1) = (gy * r / g, (gy + 1) * r / g);
                for gx in 0..g {
                    let (x0, x1) = (gx * r / g, (gx + 1) * r / g);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += f64::from(input[[c, y, x]]);
                        }
                    }
                    pooled.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        pooled
    }

    fn jitter_rng(&self, input: &Array3<f32>) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in input.iter() {
            h.update(v.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl Encoder for MockEncoder {
    fn manifest(&self) -> &EncoderManifest {
        &self.manifest
    }

    fn encode(&self, input: &Array3<f32>) -> Result<FeatureVector> {
        self.check_input(input)?;
        let pooled = self.pool(input);
        let k = pooled.len();
        let inv_sqrt_k = 1.0 / (k as f64).sqrt();
        let mut rng = self.jitter_rng(input);
        let out: Vec<f64> = self
            .projection
            .chunks_exact(k)
            .map(|row| {
                let proj: f64 = row.iter().zip(&pooled).map(|(&w, &x)| f64::from(w) * x).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                proj * inv_sqrt_k + HASH_JITTER * noise
            })
            .collect();
        normalize_wide(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, r, r), |_| rng.random_range(-2.0f32..2.0))
    }

    #[test]
    fn pure_function_of_input() {
        let enc = MockEncoder::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 32);
        let a = enc.encode(&t).unwrap();
        let b = MockEncoder::new(3).encode(&t).unwrap();
        let bits = |v: &FeatureVector| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&MockEncoder::new(4).encode(&t).unwrap()));
    }

    #[test]
    fn output_is_unit_norm_with_manifest_dim() {
        let enc = MockEncoder::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = enc.encode(&random_tensor(&mut rng, 32)).unwrap();
            assert_eq!(f.dim(), enc.manifest().feature_dim);
            assert!((f.norm() - 1.0).abs() < 1e-6);
            assert!(f.is_normalized());
        }
        let zeros = Array3::zeros((3, 32, 32));
        assert!((enc.encode(&zeros).unwrap().norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_shape() {
        let enc = MockEncoder::new(0);
        assert!(enc.encode(&Array3::zeros((3, 16, 16))).is_err());
    }

    #[test]
    fn similar_inputs_stay_close() {
        let enc = MockEncoder::new(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_tensor(&mut rng, 32);
        let nudged = &base + &Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-0.05f32..0.05));
        let cos = enc.encode(&base).unwrap().dot(&enc.encode(&nudged).unwrap()).unwrap();
        assert!(cos > 0.95, "cos = {cos}");
    }

    #[test]
    fn no_collisions_over_many_inputs() {
        let mut m = EncoderManifest::mock(42);
        m.input_resolution = 8;
        m.feature_dim = 16;
        let enc = MockEncoder::with_manifest(42, m);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let f = enc.encode(&random_tensor(&mut rng, 8)).unwrap();
            let key: Vec<u32> = f.as_slice().iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key));
        }
    }
}
