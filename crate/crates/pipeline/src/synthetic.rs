//! A small synthetic project: colour classes whose real and generated images form
//! well-separated feature clusters under the mock encoder. Built through the regular
//! pipeline stages with in-process stub engines, so it exercises the same code paths
//! as a real project.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::config::PromptStyle;
use crate::dataset::ClassEntry;
use crate::error::{PipelineError, Result};
use crate::imagegen::{plan_jobs, run_pending, GenParams, GenerateRequest, GenerationManifest, StubImageGenerator};
use crate::layout::ProjectLayout;
use crate::promptgen::{baseline_prompt_set, store_prompts, PromptSession, StubChatProvider};

/// Class id and base colour.
pub const COLOR_CLASSES: [(&str, [u8; 3]); 3] = [("blue", [30, 60, 220]), ("green", [40, 200, 60]), ("red", [220, 40, 40])];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub real_per_class: usize,
    pub n_g: usize,
    pub global_seed: u64,
    pub image_size: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dataset_id: "colors".into(),
            real_per_class: 10,
            n_g: 5,
            global_seed: 7,
            image_size: 40,
        }
    }
}

/// xorshift64*; enough for pixel jitter and independent of any RNG crate's stream.
struct Jitter(u64);

impl Jitter {
    fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[-amp, amp]`.
    fn offset(&mut self, amp: i32) -> i32 {
        (self.next() % (2 * amp as u64 + 1)) as i32 - amp
    }
}

/// A noisy, softly shaded image around `base`.
pub fn color_image(base: [u8; 3], width: u32, height: u32, seed: u64) -> RgbImage {
    let mut j = Jitter::new(seed);
    let shift = j.offset(20);
    RgbImage::from_fn(width, height, |x, y| {
        let shade = ((x + y) as i32 * 10) / (width + height) as i32;
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (base[c] as i32 + shift + shade + j.offset(12)).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}

fn class_color(prompt: &str) -> Option<[u8; 3]> {
    COLOR_CLASSES
        .iter()
        .find(|(name, _)| prompt.to_ascii_lowercase().contains(name))
        .map(|(_, c)| *c)
}

/// Paints the colour named in the prompt; a prompt containing `mislabel:<class>`
/// paints that class instead, to simulate a wrong-category generation.
pub fn color_generator() -> StubImageGenerator {
    StubImageGenerator::new("stub-color", |req: &GenerateRequest| {
        let color = match req.prompt.split("mislabel:").nth(1) {
            Some(target) => class_color(target),
            None => class_color(&req.prompt),
        }
        .unwrap_or([128, 128, 128]);
        Ok(color_image(color, req.width, req.height, req.seed))
    })
}

/// Writes real images, prompts for both styles and executed generation manifests
/// under `root`.
pub fn build_project(root: &Path, spec: &SyntheticSpec) -> Result<ProjectLayout> {
    let layout = ProjectLayout::new(root);
    let size = spec.image_size;
    for (i, (class, color)) in COLOR_CLASSES.iter().enumerate() {
        let dir = layout.dataset_dir(&spec.dataset_id).join(class);
        fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
        for n in 0..spec.real_per_class {
            let path = dir.join(format!("{n:03}.png"));
            color_image(*color, size, size, 1000 * i as u64 + n as u64)
                .save(&path)
                .map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))?;
        }
    }

    let provider = StubChatProvider::numbered(spec.n_g);
    let mut session = PromptSession::new(&provider, &spec.dataset_id, spec.n_g);
    let params = GenParams {
        width: size,
        height: size,
        ..GenParams::default()
    };
    let generator = color_generator();
    for style in [PromptStyle::CoarseToFine, PromptStyle::Baseline] {
        let mut manifest = GenerationManifest::new(&spec.dataset_id, style, "stub-color", spec.global_seed);
        for (class, _) in COLOR_CLASSES {
            let entry = ClassEntry::from_dir_name(class);
            let set = match style {
                PromptStyle::CoarseToFine => session.describe(&entry)?,
                PromptStyle::Baseline => baseline_prompt_set(&spec.dataset_id, &entry, spec.n_g)?,
            };
            store_prompts(&layout, &set)?;
            manifest.set_plan(class, plan_jobs(&set, spec.global_seed, &params)?);
        }
        run_pending(&mut manifest, &layout, &generator, 4, None)?;
    }
    Ok(layout)
}
