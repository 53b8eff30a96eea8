//! Store-level review operations shared by the CLI and the HTTP service: each call
//! loads the affected files, applies one change and writes them back.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::calibration::{flag_generation, flag_prompt, unflag_generation, unflag_prompt, FlagRecord, FlagSubmission, FlagTarget};
use crate::config::PromptStyle;
use crate::error::{PipelineError, Result};
use crate::imagegen::{GenerationJob, GenerationManifest, JobStatus};
use crate::layout::ProjectLayout;
use crate::promptgen::{list_prompt_classes, load_prompts, store_prompts, PromptEntry};

const STYLES: [PromptStyle; 2] = [PromptStyle::CoarseToFine, PromptStyle::Baseline];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub has_real_images: bool,
    /// Prompt styles with a generation manifest.
    pub generated_styles: Vec<PromptStyle>,
}

/// Datasets known from real-image directories, prompt stores or generation stores.
pub fn list_datasets(layout: &ProjectLayout) -> Result<Vec<DatasetSummary>> {
    let mut ids: BTreeSet<String> = crate::promptgen::list_subdirs(&layout.datasets_root())?.into_iter().collect();
    for style in STYLES {
        ids.extend(crate::promptgen::list_subdirs(&layout.generated_root(style))?);
        ids.extend(crate::promptgen::list_subdirs(&layout.prompt_root(style))?);
    }
    Ok(ids
        .into_iter()
        .map(|id| DatasetSummary {
            has_real_images: layout.dataset_dir(&id).is_dir(),
            generated_styles: STYLES
                .into_iter()
                .filter(|s| GenerationManifest::path(layout, *s, &id).is_file())
                .collect(),
            dataset_id: id,
        })
        .collect())
}

fn manifests(layout: &ProjectLayout) -> Result<Vec<GenerationManifest>> {
    let mut out = Vec::new();
    for summary in list_datasets(layout)? {
        for style in summary.generated_styles {
            out.push(GenerationManifest::load(layout, style, &summary.dataset_id)?);
        }
    }
    Ok(out)
}

/// The manifest holding `generation_id`.
pub fn find_generation(layout: &ProjectLayout, generation_id: &str) -> Result<GenerationManifest> {
    manifests(layout)?
        .into_iter()
        .find(|m| m.job(generation_id).is_some())
        .ok_or_else(|| PipelineError::NotFound(format!("generation `{generation_id}`")))
}

/// The single dataset with a prompt directory for `class_id`, when `dataset` is not given.
pub fn resolve_dataset(layout: &ProjectLayout, dataset: Option<&str>, style: PromptStyle, class_id: &str) -> Result<String> {
    if let Some(d) = dataset {
        return Ok(d.to_owned());
    }
    let mut hits = Vec::new();
    for summary in list_datasets(layout)? {
        if list_prompt_classes(layout, style, &summary.dataset_id)?.iter().any(|c| c == class_id) {
            hits.push(summary.dataset_id);
        }
    }
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => Err(PipelineError::NotFound(format!("class `{class_id}` ({style})"))),
        _ => Err(PipelineError::Invalid(format!(
            "class `{class_id}` exists in several datasets ({}); pass a dataset",
            hits.join(", ")
        ))),
    }
}

/// Records a flag on a generation or a prompt. Flagging the same target again
/// returns the same flag id.
pub fn submit_flag(layout: &ProjectLayout, dataset: Option<&str>, style: PromptStyle, submission: &FlagSubmission) -> Result<FlagRecord> {
    match &submission.target {
        FlagTarget::Generation { generation_id } => {
            let mut manifest = find_generation(layout, generation_id)?;
            let record = flag_generation(&mut manifest, submission)?;
            manifest.save(layout)?;
            Ok(record)
        }
        FlagTarget::Prompt { class_id, .. } => {
            let dataset = resolve_dataset(layout, dataset, style, class_id)?;
            let mut set = load_prompts(layout, style, &dataset, class_id)?;
            let record = flag_prompt(&mut set, submission)?;
            store_prompts(layout, &set)?;
            Ok(record)
        }
    }
}

/// Removes a flag wherever it is stored.
pub fn remove_flag(layout: &ProjectLayout, flag_id: &str) -> Result<()> {
    for mut manifest in manifests(layout)? {
        if unflag_generation(&mut manifest, flag_id) {
            return manifest.save(layout);
        }
    }
    for summary in list_datasets(layout)? {
        for style in STYLES {
            for class in list_prompt_classes(layout, style, &summary.dataset_id)? {
                let mut set = load_prompts(layout, style, &summary.dataset_id, &class)?;
                if unflag_prompt(&mut set, flag_id) {
                    return store_prompts(layout, &set);
                }
            }
        }
    }
    Err(PipelineError::NotFound(format!("flag `{flag_id}`")))
}

/// Sets (or with `None`/blank text, clears) the replacement text of one prompt.
pub fn set_prompt_replacement(
    layout: &ProjectLayout,
    dataset: &str,
    style: PromptStyle,
    class_id: &str,
    prompt_no: usize,
    text: Option<&str>,
) -> Result<PromptEntry> {
    let mut set = load_prompts(layout, style, dataset, class_id)?;
    let entry = set
        .entry_mut(prompt_no)
        .ok_or_else(|| PipelineError::NotFound(format!("prompt {prompt_no} of class `{class_id}`")))?;
    entry.replacement = text.map(str::trim).filter(|t| !t.is_empty()).map(str::to_owned);
    let updated = entry.clone();
    store_prompts(layout, &set)?;
    Ok(updated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedRegeneration {
    pub dataset_id: String,
    pub style: PromptStyle,
    pub parent: String,
    pub job: GenerationJob,
}

/// Queues a regeneration. Without an explicit prompt, a stored replacement for the
/// job's prompt is used when one exists.
pub fn queue_regeneration(
    layout: &ProjectLayout,
    generation_id: &str,
    new_prompt: Option<&str>,
    new_seed: Option<u64>,
) -> Result<QueuedRegeneration> {
    let mut manifest = find_generation(layout, generation_id)?;
    let parent = manifest.job(generation_id).expect("found above").clone();
    let replacement = match new_prompt {
        Some(p) => Some(p.to_owned()),
        None => load_prompts(layout, manifest.style, &manifest.dataset_id, &parent.class_id)
            .ok()
            .and_then(|set| set.entry(parent.prompt_no).and_then(|e| e.replacement.clone())),
    };
    let id = manifest.queue_regeneration(generation_id, replacement.as_deref(), new_seed)?;
    manifest.save(layout)?;
    Ok(QueuedRegeneration {
        dataset_id: manifest.dataset_id.clone(),
        style: manifest.style,
        parent: generation_id.to_owned(),
        job: manifest.job(&id).expect("just queued").clone(),
    })
}

/// Generated-image counts of one class, before and after calibration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeImpact {
    pub uncorrected_sources: usize,
    pub calibrated_sources: usize,
    pub flagged: usize,
    pub pending: usize,
}

pub fn prototype_impact(manifest: &GenerationManifest, class_id: &str) -> PrototypeImpact {
    let jobs = manifest.class_jobs(class_id);
    PrototypeImpact {
        uncorrected_sources: manifest.sources(class_id, false).len(),
        calibrated_sources: manifest.sources(class_id, true).len(),
        flagged: jobs.iter().filter(|j| j.status == JobStatus::Flagged).count(),
        pending: jobs.iter().filter(|j| j.status == JobStatus::Pending).count(),
    }
}
