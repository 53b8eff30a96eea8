use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use ndarray::Array3;

use super::EncoderManifest;
use crate::error::{CoreError, Result};
use crate::schedule::CropRegion;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| CoreError::Decode {
        path: path.to_owned(),
        source,
    })?;
    Ok(img.into_rgb8())
}

/// Crop, bicubic resize to `R × R`, scale to `[0, 1]`, then `(x - mean) / std` per channel.
///
/// Returns a channel-first tensor of shape `(3, R, R)`.
pub fn preprocess(image: &RgbImage, region: CropRegion, manifest: &EncoderManifest) -> Result<Array3<f32>> {
    if !region.fits_within(image.width(), image.height()) {
        return Err(CoreError::domain(format!(
            "crop {region:?} does not fit a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let r = manifest.input_resolution;
    let cropped = imageops::crop_imm(image, region.x, region.y, region.width, region.height).to_image();
    let as_float = DynamicImage::ImageRgb8(cropped).into_rgb32f();
    let resized = if as_float.dimensions() == (r, r) {
        as_float
    } else {
        imageops::resize(&as_float, r, r, FilterType::CatmullRom)
    };
    let side = r as usize;
    let mut out = Array3::<f32>::zeros((3, side, side));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (px.0[c] - manifest.channel_mean[c]) / manifest.channel_std[c];
        }
    }
    Ok(out)
}
