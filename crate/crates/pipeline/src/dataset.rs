//! Real-image datasets stored as one directory per class.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vizproto_core::{ImageRecord, ImageSource};

use crate::error::{PipelineError, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: String,
    /// Human-readable name used in prompts.
    pub class_name: String,
}

impl ClassEntry {
    pub fn from_dir_name(dir: &str) -> Self {
        Self {
            class_id: dir.to_owned(),
            class_name: dir.replace('_', " "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageRecord>,
    /// Every image is a test image; there is no training split.
    pub split: String,
    pub empty_classes: Vec<String>,
    pub skipped_files: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn class(&self, class_id: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.class_id.as_str())
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(PipelineError::io(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(PipelineError::io(dir))?;
    entries.sort();
    Ok(entries)
}

/// Reads `<dataset_dir>/<class>/*.{png,jpg}`. Classes come from subdirectory names and
/// images are listed in sorted path order.
pub fn ingest_dataset(dataset_dir: &Path, dataset_id: &str) -> Result<DatasetManifest> {
    if !dataset_dir.is_dir() {
        return Err(PipelineError::NotFound(format!(
            "dataset directory {}",
            dataset_dir.display()
        )));
    }
    let mut manifest = DatasetManifest {
        dataset_id: dataset_id.to_owned(),
        classes: Vec::new(),
        images: Vec::new(),
        split: "all".into(),
        empty_classes: Vec::new(),
        skipped_files: Vec::new(),
    };
    for class_dir in sorted_entries(dataset_dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let Some(dir_name) = class_dir.file_name().and_then(|n| n.to_str()) else {
            log::warn!("skipping non-UTF-8 class directory {}", class_dir.display());
            continue;
        };
        let class = ClassEntry::from_dir_name(dir_name);
        let mut count = 0;
        for file in sorted_entries(&class_dir)? {
            if !file.is_file() {
                continue;
            }
            if !has_image_extension(&file) {
                log::warn!("skipping non-image file {}", file.display());
                manifest.skipped_files.push(file);
                continue;
            }
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let image_id = format!("real/{}/{}", class.class_id, name);
            match ImageRecord::probe(image_id, ImageSource::RealDataset, &file, &class.class_id) {
                Ok(record) => {
                    manifest.images.push(record);
                    count += 1;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image: {e}");
                    manifest.skipped_files.push(file);
                }
            }
        }
        if count == 0 {
            log::warn!("class directory {} holds no images", class_dir.display());
            manifest.empty_classes.push(class.class_id.clone());
        }
        manifest.classes.push(class);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn ingests_sorted_classes_and_skips_junk() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (class, n) in [("Golden_Retriever", 2), ("Abyssinian", 1), ("Empty", 0)] {
            let d = root.join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..n {
                RgbImage::from_pixel(4, 3, Rgb([i as u8, 0, 0])).save(d.join(format!("{i}.png"))).unwrap();
            }
        }
        fs::write(root.join("Abyssinian/notes.txt"), "x").unwrap();
        fs::write(root.join("Abyssinian/bad.jpg"), "not a jpeg").unwrap();

        let m = ingest_dataset(root, "PET").unwrap();
        let ids: Vec<_> = m.class_ids().collect();
        assert_eq!(ids, vec!["Abyssinian", "Empty", "Golden_Retriever"]);
        assert_eq!(m.class("Golden_Retriever").unwrap().class_name, "Golden Retriever");
        assert_eq!(m.images.len(), 3);
        assert_eq!(m.images[0].image_id, "real/Abyssinian/0.png");
        assert_eq!((m.images[0].width, m.images[0].height), (4, 3));
        assert_eq!(m.empty_classes, vec!["Empty"]);
        assert_eq!(m.skipped_files.len(), 2);
        assert_eq!(m.split, "all");
    }

    #[test]
    fn missing_directory_is_not_found() {
        assert!(matches!(
            ingest_dataset(Path::new("/nonexistent/dataset"), "x"),
            Err(PipelineError::NotFound(_))
        ));
    }
}
