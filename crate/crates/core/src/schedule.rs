//! Scale schedules, centered crop geometry and weighted multi-scale aggregation.
//!
//! Scale `n` (1-based) of an `N`-scale schedule uses weight `(N + 1 - n) / (N (N + 1) / 2)`
//! and crop ratio `1 / n`, so the full image always carries the largest weight and
//! the weights sum to one.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::vector::{narrow, normalize_wide, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub weight: f64,
    pub crop_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    entries: Vec<ScaleEntry>,
}

impl ScaleSchedule {
    pub fn n_scales(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[ScaleEntry] {
        &self.entries
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.weight)
    }

    pub fn crop_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.crop_ratio)
    }

    /// Stable digest of the schedule, used to key cached features.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            hasher.update(e.weight.to_le_bytes());
            hasher.update(e.crop_ratio.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

pub fn make_schedule(n_scales: usize) -> Result<ScaleSchedule> {
    if n_scales == 0 {
        return Err(CoreError::domain("a scale schedule needs at least one scale"));
    }
    let n = n_scales as f64;
    let total = n * (n + 1.0) / 2.0;
    let entries = (1..=n_scales)
        .map(|i| {
            let i = i as f64;
            ScaleEntry {
                weight: (n + 1.0 - i) / total,
                crop_ratio: 1.0 / i,
            }
        })
        .collect();
    Ok(ScaleSchedule { entries })
}

/// Pixel rectangle inside a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRegion {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRegion {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn fits_within(&self, image_width: u32, image_height: u32) -> bool {
        self.width >= 1
            && self.height >= 1
            && u64::from(self.x) + u64::from(self.width) <= u64::from(image_width)
            && u64::from(self.y) + u64::from(self.height) <= u64::from(image_height)
    }
}

/// Center crop covering `crop_ratio` of each side. Sizes round half up, offsets floor.
pub fn crop_region_for_scale(image_width: u32, image_height: u32, crop_ratio: f64) -> Result<CropRegion> {
    if image_width == 0 || image_height == 0 {
        return Err(CoreError::domain("image dimensions must be at least 1 px"));
    }
    if !(crop_ratio > 0.0 && crop_ratio <= 1.0) {
        return Err(CoreError::domain(format!(
            "crop ratio must be in (0, 1], got {crop_ratio}"
        )));
    }
    let side = |len: u32| -> u32 {
        let scaled = (crop_ratio * f64::from(len) + 0.5).floor() as u32;
        scaled.clamp(1, len)
    };
    let width = side(image_width);
    let height = side(image_height);
    Ok(CropRegion {
        x: (image_width - width) / 2,
        y: (image_height - height) / 2,
        width,
        height,
    })
}

/// Whether aggregated vectors are rescaled to unit norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    #[default]
    Renormalize,
    /// Literal weighted sum / plain mean with no final normalization.
    Raw,
}

impl AggregateMode {
    pub fn from_raw_flag(raw: bool) -> Self {
        if raw {
            AggregateMode::Raw
        } else {
            AggregateMode::Renormalize
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggregateMode::Renormalize => "norm",
            AggregateMode::Raw => "raw",
        }
    }
}

/// Weighted sum of per-scale features, `Σ w_n · f_n`.
pub fn aggregate_multiscale(
    per_scale: &[FeatureVector],
    schedule: &ScaleSchedule,
    mode: AggregateMode,
) -> Result<FeatureVector> {
    if per_scale.len() != schedule.n_scales() {
        return Err(CoreError::LengthMismatch {
            expected: schedule.n_scales(),
            actual: per_scale.len(),
        });
    }
    // w_1 = 1: the blend is the input itself, so skip the f64 round trip
    if let [only] = per_scale {
        if only.is_normalized() || (mode == AggregateMode::Raw && only.as_slice().iter().any(|&v| v != 0.0)) {
            return Ok(only.clone());
        }
    }
    let d = per_scale[0].dim();
    let mut acc = vec![0.0f64; d];
    for (feature, entry) in per_scale.iter().zip(schedule.entries()) {
        feature.check_dim(d)?;
        for (a, &v) in acc.iter_mut().zip(feature.as_slice()) {
            *a += entry.weight * f64::from(v);
        }
    }
    if acc.iter().all(|&v| v == 0.0) {
        return Err(CoreError::domain("multi-scale aggregate has zero norm"));
    }
    match mode {
        AggregateMode::Renormalize => normalize_wide(&acc),
        AggregateMode::Raw => narrow(&acc),
    }
}
