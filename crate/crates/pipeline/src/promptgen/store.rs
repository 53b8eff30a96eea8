//! `<root>/<dataset>/<class>/<No.>.txt` plus a `prompts.json` sidecar with calibration state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Deficiency, PromptEntry, PromptSet, PromptStatus};
use crate::calibration::FlagRecord;
use crate::config::PromptStyle;
use crate::error::{PipelineError, Result};
use crate::layout::{read_json, write_atomic, write_json, ProjectLayout};

pub const PROMPT_SIDECAR: &str = "prompts.json";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dataset_id: String,
    class_id: String,
    class_name: String,
    style: PromptStyle,
    provider_id: String,
    created_at: String,
    expected: usize,
    entries: Vec<SidecarEntry>,
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    no: usize,
    /// Derived from the other fields; written for readers of the file.
    status: PromptStatus,
    #[serde(default)]
    approved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    replacement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flag: Option<FlagRecord>,
}

fn numbered_txt(name: &str) -> Option<usize> {
    let stem = name.strip_suffix(".txt")?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

pub fn store_prompts(layout: &ProjectLayout, set: &PromptSet) -> Result<()> {
    let dir = layout.prompt_class_dir(set.style, &set.dataset_id, &set.class_id);
    fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    // drop numbered files that are no longer part of the set
    for entry in fs::read_dir(&dir).map_err(PipelineError::io(&dir))? {
        let path = entry.map_err(PipelineError::io(&dir))?.path();
        if let Some(no) = path.file_name().and_then(|n| n.to_str()).and_then(numbered_txt) {
            if set.entry(no).is_none() {
                fs::remove_file(&path).map_err(PipelineError::io(&path))?;
            }
        }
    }
    for p in &set.prompts {
        write_atomic(&dir.join(format!("{}.txt", p.no)), p.text.as_bytes())?;
    }
    let sidecar = Sidecar {
        dataset_id: set.dataset_id.clone(),
        class_id: set.class_id.clone(),
        class_name: set.class_name.clone(),
        style: set.style,
        provider_id: set.provider_id.clone(),
        created_at: set.created_at.clone(),
        expected: set.expected_len(),
        entries: set
            .prompts
            .iter()
            .map(|p| SidecarEntry {
                no: p.no,
                status: p.status(),
                approved: p.approved,
                replacement: p.replacement.clone(),
                flag: p.flag.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(PROMPT_SIDECAR), &sidecar)
}

/// Loads a stored set ordered by `No.`; index gaps are reported as a [`Deficiency`].
pub fn load_prompts(layout: &ProjectLayout, style: PromptStyle, dataset_id: &str, class_id: &str) -> Result<PromptSet> {
    let dir = layout.prompt_class_dir(style, dataset_id, class_id);
    if !dir.is_dir() {
        return Err(PipelineError::NotFound(format!(
            "prompts for {dataset_id}/{class_id} ({style}) at {}",
            dir.display()
        )));
    }
    let sidecar_path = dir.join(PROMPT_SIDECAR);
    let sidecar: Option<Sidecar> = if sidecar_path.exists() {
        Some(read_json(&sidecar_path)?)
    } else {
        None
    };
    let mut numbers: Vec<usize> = fs::read_dir(&dir)
        .map_err(PipelineError::io(&dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(numbered_txt))
        .collect();
    numbers.sort_unstable();
    let mut prompts = Vec::with_capacity(numbers.len());
    for no in numbers {
        let path = dir.join(format!("{no}.txt"));
        let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
        let mut entry = PromptEntry::new(no, text);
        if let Some(sc) = sidecar.as_ref().and_then(|s| s.entries.iter().find(|e| e.no == no)) {
            entry.approved = sc.approved;
            entry.replacement = sc.replacement.clone();
            entry.flag = sc.flag.clone();
        }
        prompts.push(entry);
    }
    let expected = sidecar
        .as_ref()
        .map_or_else(|| prompts.last().map_or(0, |p| p.no), |s| s.expected);
    let deficiency = Deficiency::check(expected, prompts.iter().map(|p| p.no));
    if let Some(d) = &deficiency {
        log::warn!("{dataset_id}/{class_id}: prompt numbers {:?} are missing", d.missing);
    }
    let (class_name, provider_id, created_at) = match sidecar {
        Some(s) => (s.class_name, s.provider_id, s.created_at),
        None => (class_id.replace('_', " "), "unknown".into(), String::new()),
    };
    Ok(PromptSet {
        dataset_id: dataset_id.to_owned(),
        class_id: class_id.to_owned(),
        class_name,
        style,
        prompts,
        provider_id,
        created_at,
        deficiency,
    })
}

/// Class ids with a prompt directory under `dataset_id`, sorted.
pub fn list_prompt_classes(layout: &ProjectLayout, style: PromptStyle, dataset_id: &str) -> Result<Vec<String>> {
    let dir = layout.prompt_root(style).join(crate::layout::sanitize_name(dataset_id));
    list_subdirs(&dir)
}

pub fn list_subdirs(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<String> = fs::read_dir(dir)
        .map_err(PipelineError::io(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .collect();
    out.sort();
    Ok(out)
}
