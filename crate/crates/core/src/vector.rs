use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance on the Euclidean norm of vectors flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A d-dimensional image embedding.
///
/// `normalized` records whether the vector was produced by an L2 normalization
/// step; it is metadata, not re-verified on every access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f32>,
    #[serde(default)]
    normalized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::domain("feature vector must have d > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::domain("feature vector has non-finite entries"));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps values already known to be unit norm (for example read back from the cache).
    pub fn from_normalized(values: Vec<f32>) -> Result<Self> {
        let mut v = Self::new(values)?;
        v.normalized = true;
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        self.check_dim(other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(CoreError::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    /// Multiplies every component by `factor`. The result is no longer flagged normalized
    /// unless `factor == 1`.
    pub fn scaled(&self, factor: f32) -> FeatureVector {
        FeatureVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            normalized: self.normalized && factor == 1.0,
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Rescales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let wide: Vec<f64> = v.values.iter().map(|&x| f64::from(x)).collect();
    normalize_wide(&wide)
}

/// Normalizes an f64 accumulator and narrows it to f32.
pub(crate) fn normalize_wide(values: &[f64]) -> Result<FeatureVector> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(CoreError::domain("cannot normalize a zero-norm vector"));
    }
    FeatureVector::from_normalized(values.iter().map(|v| (v / norm) as f32).collect())
}

pub(crate) fn narrow(values: &[f64]) -> Result<FeatureVector> {
    FeatureVector::new(values.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalizes_three_four_five() {
        let v = FeatureVector::new(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert_eq!(n.as_slice(), &[0.6, 0.8]);
        assert!(n.is_normalized());
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let v = FeatureVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&v).unwrap().as_slice(), v.as_slice());
    }

    #[test]
    fn rejects_zero_vector() {
        let v = FeatureVector::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&v), Err(CoreError::Domain(_))));
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn dot_checks_dimensions() {
        let a = FeatureVector::new(vec![1.0, 0.0]).unwrap();
        let b = FeatureVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            a.dot(&b),
            Err(CoreError::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(values in prop::collection::vec(-100.0f32..100.0, 1..64)) {
            prop_assume!(values.iter().any(|v| v.abs() > 1e-3));
            let v = FeatureVector::new(values).unwrap();
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            assert_abs_diff_eq!(once.norm(), 1.0, epsilon = UNIT_NORM_TOLERANCE);
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-7);
            }
        }
    }
}
