//! Human review: flags on prompts and generations, and the error statistics derived from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};
use crate::imagegen::{GenerationManifest, JobStatus};
use crate::promptgen::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagCategory {
    WrongCategory,
    PoorComposition,
}

impl FlagCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagCategory::WrongCategory => "wrong_category",
            FlagCategory::PoorComposition => "poor_composition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub id: String,
    pub category: FlagCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub reviewer_id: String,
}

impl FlagRecord {
    pub fn new(id: impl Into<String>, category: FlagCategory, note: Option<String>, reviewer_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category,
            note,
            reviewer_id: reviewer_id.into(),
        }
    }
}

/// What a flag points at.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlagTarget {
    Generation { generation_id: String },
    Prompt { class_id: String, prompt_no: usize },
}

/// A reviewer's flag as submitted through the CLI or the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagSubmission {
    #[serde(flatten)]
    pub target: FlagTarget,
    pub category: FlagCategory,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default = "anonymous")]
    pub reviewer_id: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

/// Deterministic flag id, so flagging the same target twice is idempotent.
pub fn flag_id(dataset_id: &str, target: &FlagTarget) -> String {
    let descriptor = match target {
        FlagTarget::Generation { generation_id } => format!("gen|{dataset_id}|{generation_id}"),
        FlagTarget::Prompt { class_id, prompt_no } => format!("prompt|{dataset_id}|{class_id}|{prompt_no}"),
    };
    format!("f{}", &hex::encode(Sha256::digest(descriptor.as_bytes()))[..12])
}

/// Marks a generation as flagged. Re-flagging updates category and note in place.
pub fn flag_generation(manifest: &mut GenerationManifest, submission: &FlagSubmission) -> Result<FlagRecord> {
    let FlagTarget::Generation { generation_id } = &submission.target else {
        return Err(PipelineError::Invalid("expected a generation target".into()));
    };
    let id = flag_id(&manifest.dataset_id, &submission.target);
    let job = manifest
        .job_mut(generation_id)
        .ok_or_else(|| PipelineError::NotFound(format!("generation `{generation_id}`")))?;
    match job.status {
        JobStatus::Done | JobStatus::Flagged => {}
        other => {
            return Err(PipelineError::Invalid(format!(
                "generation `{generation_id}` is {other:?} and cannot be flagged"
            )))
        }
    }
    let record = FlagRecord::new(id, submission.category, submission.note.clone(), &submission.reviewer_id);
    job.status = JobStatus::Flagged;
    job.flag = Some(record.clone());
    Ok(record)
}

/// Removes a generation flag. Returns false when no job carries `flag_id`.
pub fn unflag_generation(manifest: &mut GenerationManifest, flag_id: &str) -> bool {
    let Some(job) = manifest
        .jobs_mut()
        .find(|j| j.flag.as_ref().is_some_and(|f| f.id == flag_id))
    else {
        return false;
    };
    job.flag = None;
    if job.status == JobStatus::Flagged {
        job.status = JobStatus::Done;
    }
    true
}

pub fn flag_prompt(set: &mut PromptSet, submission: &FlagSubmission) -> Result<FlagRecord> {
    let FlagTarget::Prompt { prompt_no, .. } = &submission.target else {
        return Err(PipelineError::Invalid("expected a prompt target".into()));
    };
    let id = flag_id(&set.dataset_id, &submission.target);
    let entry = set.entry_mut(*prompt_no).ok_or_else(|| {
        PipelineError::NotFound(format!("prompt {} of class `{}`", prompt_no, submission_class(submission)))
    })?;
    let record = FlagRecord::new(id, submission.category, submission.note.clone(), &submission.reviewer_id);
    entry.flag = Some(record.clone());
    Ok(record)
}

fn submission_class(s: &FlagSubmission) -> &str {
    match &s.target {
        FlagTarget::Prompt { class_id, .. } => class_id,
        FlagTarget::Generation { generation_id } => generation_id,
    }
}

pub fn unflag_prompt(set: &mut PromptSet, flag_id: &str) -> bool {
    match set
        .prompts
        .iter_mut()
        .find(|p| p.flag.as_ref().is_some_and(|f| f.id == flag_id))
    {
        Some(entry) => {
            entry.flag = None;
            true
        }
        None => false,
    }
}

/// Applies generation flags to a copy of `manifest` and queues one pending regeneration
/// per newly flagged job. Flagged jobs drop out of calibrated prototype sources; the
/// original jobs stay in place so uncorrected runs remain computable.
pub fn apply_calibration(manifest: &GenerationManifest, flags: &[FlagSubmission]) -> Result<GenerationManifest> {
    let mut out = manifest.clone();
    for flag in flags {
        let FlagTarget::Generation { generation_id } = &flag.target else {
            continue;
        };
        flag_generation(&mut out, flag)?;
        if !out.has_pending_child(generation_id) {
            out.queue_regeneration(generation_id, None, None)?;
        }
    }
    Ok(out)
}

/// A reviewed item: the generation slot `(class_id, prompt_no)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ErrorItem {
    pub class_id: String,
    pub prompt_no: usize,
    pub category: FlagCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub count: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub prompt_errors: usize,
    pub image_errors: usize,
    /// Slots flagged both at the prompt and at the image.
    pub overlap: usize,
    /// Flagged slots counted once: `prompt + image - overlap`.
    pub overlap_deduplicated_total: usize,
    /// Per category: deduplicated slots carrying that category, and count / total.
    pub per_category: BTreeMap<String, CategoryCount>,
}

/// Union-count error statistics over prompt flags and image flags.
pub fn error_stats(prompt_flags: &[ErrorItem], image_flags: &[ErrorItem]) -> ErrorReport {
    let slot = |e: &ErrorItem| (e.class_id.clone(), e.prompt_no);
    let prompts: BTreeSet<_> = prompt_flags.iter().map(slot).collect();
    let images: BTreeSet<_> = image_flags.iter().map(slot).collect();
    let overlap = prompts.intersection(&images).count();
    let total = prompts.union(&images).count();

    let mut by_category: BTreeMap<FlagCategory, BTreeSet<(String, usize)>> = BTreeMap::new();
    for e in prompt_flags.iter().chain(image_flags) {
        by_category.entry(e.category).or_default().insert(slot(e));
    }
    let per_category = by_category
        .into_iter()
        .map(|(cat, slots)| {
            let count = slots.len();
            (
                cat.as_str().to_owned(),
                CategoryCount {
                    count,
                    ratio: count as f64 / total as f64,
                },
            )
        })
        .collect();
    ErrorReport {
        prompt_errors: prompts.len(),
        image_errors: images.len(),
        overlap,
        overlap_deduplicated_total: total,
        per_category,
    }
}

/// Collects prompt flags from stored sets and image flags from the manifest.
pub fn collect_error_items(
    prompt_sets: &[PromptSet],
    manifest: Option<&GenerationManifest>,
) -> (Vec<ErrorItem>, Vec<ErrorItem>) {
    let prompt_items = prompt_sets
        .iter()
        .flat_map(|set| {
            set.prompts.iter().filter_map(|p| {
                p.flag.as_ref().map(|f| ErrorItem {
                    class_id: set.class_id.clone(),
                    prompt_no: p.no,
                    category: f.category,
                })
            })
        })
        .collect();
    let image_items = manifest
        .map(|m| {
            m.jobs()
                .filter_map(|j| {
                    j.flag.as_ref().map(|f| ErrorItem {
                        class_id: j.class_id.clone(),
                        prompt_no: j.prompt_no,
                        category: f.category,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    (prompt_items, image_items)
}
