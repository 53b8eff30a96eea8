//! Multi-scale feature extraction: crop per scale, preprocess, encode, aggregate.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheKey, FeatureCache};
use crate::encoder::{load_rgb, preprocess, Encoder};
use crate::error::{CoreError, Result};
use crate::schedule::{aggregate_multiscale, crop_region_for_scale, AggregateMode, ScaleSchedule};
use crate::vector::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    RealDataset,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub source: ImageSource,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Ground truth for real images, target class for generated ones.
    pub class_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_id: Option<String>,
}

impl ImageRecord {
    /// Builds a record, reading the dimensions from the image header.
    pub fn probe(
        image_id: impl Into<String>,
        source: ImageSource,
        path: &Path,
        class_id: impl Into<String>,
    ) -> Result<Self> {
        let (width, height) = image::image_dimensions(path).map_err(|source| CoreError::Decode {
            path: path.to_owned(),
            source,
        })?;
        if width == 0 || height == 0 {
            return Err(CoreError::domain(format!("{} has an empty raster", path.display())));
        }
        Ok(Self {
            image_id: image_id.into(),
            source,
            path: path.to_owned(),
            width,
            height,
            class_id: class_id.into(),
            generation_id: None,
        })
    }

    pub fn load(&self) -> Result<RgbImage> {
        load_rgb(&self.path)
    }
}

/// Extracts aggregated features with one encoder and schedule, consulting an optional cache.
pub struct FeatureExtractor<'a> {
    encoder: &'a dyn Encoder,
    schedule: ScaleSchedule,
    mode: AggregateMode,
    cache: Option<&'a FeatureCache>,
    encode_calls: AtomicUsize,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(encoder: &'a dyn Encoder, schedule: ScaleSchedule, mode: AggregateMode) -> Self {
        Self {
            encoder,
            schedule,
            mode,
            cache: None,
            encode_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: &'a FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    /// Number of `encode` invocations made so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn cache_key(&self, image_id: &str) -> CacheKey {
        CacheKey {
            backend_id: self.encoder.manifest().backend_id.clone(),
            n_scales: self.schedule.n_scales(),
            schedule_hash: self.schedule.digest(),
            mode: self.mode,
            image_id: image_id.to_owned(),
        }
    }

    pub fn cached(&self, image_id: &str) -> Option<FeatureVector> {
        self.cache?.get(&self.cache_key(image_id)).map(|e| e.feature)
    }

    /// Features for `record`, from the cache when present.
    pub fn extract(&self, record: &ImageRecord) -> Result<FeatureVector> {
        if let Some(hit) = self.cached(&record.image_id) {
            return Ok(hit);
        }
        let image = record.load()?;
        let feature = self.extract_image(&record.image_id, &image)?;
        if let Some(cache) = self.cache {
            cache.put(&self.cache_key(&record.image_id), &feature)?;
        }
        Ok(feature)
    }

    /// Uncached extraction from a decoded image.
    pub fn extract_image(&self, image_id: &str, image: &RgbImage) -> Result<FeatureVector> {
        let manifest = self.encoder.manifest();
        let per_scale = self
            .schedule
            .entries()
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let at_scale = |source: CoreError| CoreError::AtScale {
                    image_id: image_id.to_owned(),
                    scale: i + 1,
                    source: Box::new(source),
                };
                let region = crop_region_for_scale(image.width(), image.height(), entry.crop_ratio)
                    .map_err(at_scale)?;
                let tensor = preprocess(image, region, manifest).map_err(at_scale)?;
                self.encode_calls.fetch_add(1, Ordering::Relaxed);
                self.encoder.encode(&tensor).map_err(at_scale)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate_multiscale(&per_scale, &self.schedule, self.mode)
    }

    /// Parallel [`extract`](Self::extract) preserving input order.
    pub fn extract_all(&self, records: &[ImageRecord]) -> Result<Vec<FeatureVector>> {
        records.par_iter().map(|r| self.extract(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MockEncoder;
    use crate::schedule::{make_schedule, CropRegion};
    use image::Rgb;

    fn test_image() -> RgbImage {
        RgbImage::from_fn(48, 40, |x, y| Rgb([(x * 5) as u8, (y * 6) as u8, ((x * y) % 251) as u8]))
    }

    fn bits(f: &FeatureVector) -> Vec<u32> {
        f.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn single_scale_reduces_to_one_encode() {
        let enc = MockEncoder::new(1);
        let img = test_image();
        let ex = FeatureExtractor::new(&enc, make_schedule(1).unwrap(), AggregateMode::Renormalize);
        let got = ex.extract_image("i", &img).unwrap();
        let direct = enc
            .encode(&preprocess(&img, CropRegion::full(48, 40), enc.manifest()).unwrap())
            .unwrap();
        assert_eq!(bits(&got), bits(&direct));
        assert_eq!(ex.encode_calls(), 1);
    }

    #[test]
    fn three_scales_equal_manual_composition() {
        let enc = MockEncoder::new(2);
        let img = test_image();
        let schedule = make_schedule(3).unwrap();
        let ex = FeatureExtractor::new(&enc, schedule.clone(), AggregateMode::Renormalize);
        let got = ex.extract_image("i", &img).unwrap();
        let manual: Vec<FeatureVector> = schedule
            .crop_ratios()
            .map(|r| {
                let region = crop_region_for_scale(48, 40, r).unwrap();
                enc.encode(&preprocess(&img, region, enc.manifest()).unwrap()).unwrap()
            })
            .collect();
        let expected = aggregate_multiscale(&manual, &schedule, AggregateMode::Renormalize).unwrap();
        assert_eq!(bits(&got), bits(&expected));
        assert!((got.norm() - 1.0).abs() < 1e-6);
        assert_eq!(ex.encode_calls(), 3);
    }

    #[test]
    fn cache_hit_skips_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        test_image().save(&path).unwrap();
        let rec = ImageRecord::probe("real/x", ImageSource::RealDataset, &path, "c").unwrap();
        assert_eq!((rec.width, rec.height), (48, 40));

        let enc = MockEncoder::new(3);
        let cache = FeatureCache::in_memory(enc.manifest().feature_dim);
        let ex = FeatureExtractor::new(&enc, make_schedule(2).unwrap(), AggregateMode::Renormalize)
            .with_cache(&cache);
        let first = ex.extract(&rec).unwrap();
        assert_eq!(ex.encode_calls(), 2);
        let second = ex.extract(&rec).unwrap();
        assert_eq!(ex.encode_calls(), 2);
        assert_eq!(bits(&first), bits(&second));

        // a different schedule must not be served from the same entry
        let ex3 = FeatureExtractor::new(&enc, make_schedule(3).unwrap(), AggregateMode::Renormalize)
            .with_cache(&cache);
        assert!(ex3.cached("real/x").is_none());
    }

    #[test]
    fn failure_names_scale() {
        let enc = MockEncoder::new(0);
        let ex = FeatureExtractor::new(&enc, make_schedule(2).unwrap(), AggregateMode::Renormalize);
        let rec = ImageRecord {
            image_id: "ghost".into(),
            source: ImageSource::Generated,
            path: "/nonexistent/ghost.png".into(),
            width: 1,
            height: 1,
            class_id: "c".into(),
            generation_id: None,
        };
        assert!(matches!(ex.extract(&rec), Err(CoreError::Decode { .. })));
    }
}
