//! Text-to-image job planning, execution and the generated-image store.

mod client;
mod exec;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{GenError, GenerateRequest, HttpImageGenerator, ImageGenerator, StubImageGenerator};
pub use exec::{execute, run_pending, ExecutionSummary, AUDIT_DIR};

use crate::calibration::FlagRecord;
use crate::config::{PromptStyle, T2iSettings};
use crate::error::{PipelineError, Result};
use crate::layout::{read_json, sanitize_name, write_json, ProjectLayout};
use crate::promptgen::PromptSet;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
    Flagged,
    /// Superseded by a completed child; the image lives on under the audit directory.
    Regenerated,
}

impl JobStatus {
    /// Whether the job's image file exists on disk.
    pub fn has_image(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Flagged | JobStatus::Regenerated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub guidance_scale: f64,
    pub num_inference_steps: u32,
    pub width: u32,
    pub height: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams::from(&T2iSettings::default())
    }
}

impl From<&T2iSettings> for GenParams {
    fn from(s: &T2iSettings) -> Self {
        Self {
            guidance_scale: s.guidance_scale,
            num_inference_steps: s.num_inference_steps,
            width: s.width,
            height: s.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub generation_id: String,
    pub dataset_id: String,
    pub class_id: String,
    pub prompt_no: usize,
    pub prompt_text: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub num_inference_steps: u32,
    pub width: u32,
    pub height: u32,
    pub status: JobStatus,
    /// Relative to the generation store directory.
    pub output_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// 0 for planned jobs, parent + 1 for regenerations.
    #[serde(default)]
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<FlagRecord>,
}

impl GenerationJob {
    pub fn params(&self) -> GenParams {
        GenParams {
            guidance_scale: self.guidance_scale,
            num_inference_steps: self.num_inference_steps,
            width: self.width,
            height: self.height,
        }
    }

    /// Where the current image for this slot lives, relative to the store.
    pub fn slot_path(&self) -> PathBuf {
        slot_path(&self.class_id, self.prompt_no)
    }

    pub fn sidecar_path(&self) -> PathBuf {
        PathBuf::from(sanitize_name(&self.class_id)).join(format!("{}.json", self.prompt_no))
    }
}

fn slot_path(class_id: &str, prompt_no: usize) -> PathBuf {
    PathBuf::from(sanitize_name(class_id)).join(format!("{prompt_no}.png"))
}

fn digest_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// `global_seed XOR stable_hash(dataset, class, prompt_no)`.
pub fn job_seed(global_seed: u64, dataset_id: &str, class_id: &str, prompt_no: usize) -> u64 {
    global_seed
        ^ digest_u64(&[
            dataset_id.as_bytes(),
            class_id.as_bytes(),
            prompt_no.to_string().as_bytes(),
        ])
}

fn generation_id(dataset_id: &str, class_id: &str, prompt_no: usize, text: &str, seed: u64, params: &GenParams, revision: u32) -> String {
    let id = digest_u64(&[
        dataset_id.as_bytes(),
        class_id.as_bytes(),
        prompt_no.to_string().as_bytes(),
        text.as_bytes(),
        &seed.to_le_bytes(),
        &params.guidance_scale.to_le_bytes(),
        &params.num_inference_steps.to_le_bytes(),
        &params.width.to_le_bytes(),
        &params.height.to_le_bytes(),
        &revision.to_le_bytes(),
    ]);
    format!("g{id:016x}")
}

/// One pending job per prompt. Pure in `(prompts, global_seed, params)`.
pub fn plan_jobs(prompts: &PromptSet, global_seed: u64, params: &GenParams) -> Result<Vec<GenerationJob>> {
    if prompts.prompts.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "no prompts for class `{}`",
            prompts.class_id
        )));
    }
    Ok(prompts
        .prompts
        .iter()
        .map(|p| {
            let seed = job_seed(global_seed, &prompts.dataset_id, &prompts.class_id, p.no);
            let text = p.effective_text().to_owned();
            GenerationJob {
                generation_id: generation_id(&prompts.dataset_id, &prompts.class_id, p.no, &text, seed, params, 0),
                dataset_id: prompts.dataset_id.clone(),
                class_id: prompts.class_id.clone(),
                prompt_no: p.no,
                prompt_text: text,
                seed,
                guidance_scale: params.guidance_scale,
                num_inference_steps: params.num_inference_steps,
                width: params.width,
                height: params.height,
                status: JobStatus::Pending,
                output_path: slot_path(&prompts.class_id, p.no),
                parent: None,
                revision: 0,
                error: None,
                flag: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub dataset_id: String,
    pub style: PromptStyle,
    pub engine_id: String,
    pub global_seed: u64,
    /// Jobs per class, including superseded and pending regenerations.
    pub classes: BTreeMap<String, Vec<GenerationJob>>,
}

impl GenerationManifest {
    pub fn new(dataset_id: &str, style: PromptStyle, engine_id: &str, global_seed: u64) -> Self {
        Self {
            dataset_id: dataset_id.to_owned(),
            style,
            engine_id: engine_id.to_owned(),
            global_seed,
            classes: BTreeMap::new(),
        }
    }

    pub fn path(layout: &ProjectLayout, style: PromptStyle, dataset_id: &str) -> PathBuf {
        layout.generation_store(style, dataset_id).join(MANIFEST_FILE)
    }

    pub fn load(layout: &ProjectLayout, style: PromptStyle, dataset_id: &str) -> Result<Self> {
        let path = Self::path(layout, style, dataset_id);
        if !path.exists() {
            return Err(PipelineError::NotFound(format!(
                "generation manifest {}",
                path.display()
            )));
        }
        let manifest: Self = read_json(&path)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, layout: &ProjectLayout) -> Result<()> {
        self.validate()?;
        write_json(&Self::path(layout, self.style, &self.dataset_id), self)
    }

    pub fn store_dir(&self, layout: &ProjectLayout) -> PathBuf {
        layout.generation_store(self.style, &self.dataset_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for job in self.jobs() {
            if !seen.insert(job.generation_id.as_str()) {
                return Err(PipelineError::Invalid(format!(
                    "duplicate generation id `{}`",
                    job.generation_id
                )));
            }
        }
        Ok(())
    }

    pub fn jobs(&self) -> impl Iterator<Item = &GenerationJob> {
        self.classes.values().flatten()
    }

    pub fn jobs_mut(&mut self) -> impl Iterator<Item = &mut GenerationJob> {
        self.classes.values_mut().flatten()
    }

    pub fn job(&self, generation_id: &str) -> Option<&GenerationJob> {
        self.jobs().find(|j| j.generation_id == generation_id)
    }

    pub fn job_mut(&mut self, generation_id: &str) -> Option<&mut GenerationJob> {
        self.jobs_mut().find(|j| j.generation_id == generation_id)
    }

    pub fn class_jobs(&self, class_id: &str) -> &[GenerationJob] {
        self.classes.get(class_id).map_or(&[], Vec::as_slice)
    }

    /// Installs a fresh plan for a class. Jobs whose id is unchanged keep their state,
    /// so re-planning after an interrupted run resumes instead of starting over.
    pub fn set_plan(&mut self, class_id: &str, planned: Vec<GenerationJob>) {
        let previous = self.classes.remove(class_id).unwrap_or_default();
        let jobs = planned
            .into_iter()
            .map(|job| {
                previous
                    .iter()
                    .find(|p| p.generation_id == job.generation_id)
                    .cloned()
                    .unwrap_or(job)
            })
            .collect();
        self.classes.insert(class_id.to_owned(), jobs);
    }

    pub fn has_pending_child(&self, generation_id: &str) -> bool {
        self.jobs()
            .any(|j| j.parent.as_deref() == Some(generation_id) && j.status == JobStatus::Pending)
    }

    /// Queues a regeneration of a flagged or failed job and returns the new id.
    ///
    /// With neither a new prompt nor a new seed, the seed is bumped by one so the
    /// engine produces a different image. The parent stays in place until the child
    /// completes.
    pub fn queue_regeneration(&mut self, generation_id: &str, new_prompt: Option<&str>, new_seed: Option<u64>) -> Result<String> {
        let parent = self
            .job(generation_id)
            .ok_or_else(|| PipelineError::NotFound(format!("generation `{generation_id}`")))?
            .clone();
        if !matches!(parent.status, JobStatus::Flagged | JobStatus::Failed) {
            return Err(PipelineError::Invalid(format!(
                "generation `{generation_id}` is {:?}; only flagged or failed jobs can be regenerated",
                parent.status
            )));
        }
        if let Some(existing) = self
            .jobs()
            .find(|j| j.parent.as_deref() == Some(generation_id) && j.status == JobStatus::Pending)
        {
            return Ok(existing.generation_id.clone());
        }
        let text = new_prompt.map(str::trim).filter(|t| !t.is_empty()).unwrap_or(&parent.prompt_text).to_owned();
        let seed = match new_seed {
            Some(s) => s,
            None if text == parent.prompt_text => parent.seed.wrapping_add(1),
            None => parent.seed,
        };
        let revision = parent.revision + 1;
        let params = parent.params();
        let mut id = generation_id_for(&parent, &text, seed, &params, revision);
        // the same (text, seed) may have been tried before on another branch
        let mut salt = revision;
        while self.job(&id).is_some() {
            salt += 1000;
            id = generation_id_for(&parent, &text, seed, &params, salt);
        }
        let child = GenerationJob {
            generation_id: id.clone(),
            prompt_text: text,
            seed,
            status: JobStatus::Pending,
            output_path: parent.slot_path(),
            parent: Some(parent.generation_id.clone()),
            revision,
            error: None,
            flag: None,
            ..parent.clone()
        };
        self.classes.entry(parent.class_id.clone()).or_default().push(child);
        Ok(id)
    }

    pub fn pending_ids(&self) -> Vec<String> {
        self.jobs()
            .filter(|j| j.status == JobStatus::Pending)
            .map(|j| j.generation_id.clone())
            .collect()
    }

    /// Images used for a class prototype, in prompt order.
    ///
    /// Uncorrected: every planned job (revision 0) with an image, as produced.
    /// Calibrated: per slot, the current `Done` job; flagged and failed slots drop out.
    pub fn sources(&self, class_id: &str, calibrated: bool) -> Vec<&GenerationJob> {
        let mut out: Vec<&GenerationJob> = self
            .class_jobs(class_id)
            .iter()
            .filter(|j| {
                if calibrated {
                    j.status == JobStatus::Done
                } else {
                    j.parent.is_none() && j.status.has_image()
                }
            })
            .collect();
        out.sort_by_key(|j| (j.prompt_no, j.revision));
        out
    }

    /// Whether review changes make the calibrated prototype of `class_id` differ
    /// from the uncorrected one.
    pub fn calibration_changed(&self, class_id: &str) -> bool {
        let ids = |calibrated| -> Vec<&str> {
            self.sources(class_id, calibrated).iter().map(|j| j.generation_id.as_str()).collect()
        };
        ids(true) != ids(false)
    }

    /// Classes with [`calibration_changed`](Self::calibration_changed) set.
    pub fn changed_classes(&self) -> Vec<String> {
        self.classes.keys().filter(|c| self.calibration_changed(c)).cloned().collect()
    }

    /// Union of both source sets, with the indices of entries excluded by calibration.
    pub fn sources_with_exclusions(&self, class_id: &str) -> (Vec<&GenerationJob>, BTreeSet<usize>) {
        let mut all: Vec<&GenerationJob> = self
            .class_jobs(class_id)
            .iter()
            .filter(|j| (j.parent.is_none() && j.status.has_image()) || j.status == JobStatus::Done)
            .collect();
        all.sort_by_key(|j| (j.prompt_no, j.revision));
        let excluded = all
            .iter()
            .enumerate()
            .filter(|(_, j)| j.status != JobStatus::Done)
            .map(|(i, _)| i)
            .collect();
        (all, excluded)
    }

    /// Absolute path of a job's image.
    pub fn image_path(&self, layout: &ProjectLayout, job: &GenerationJob) -> PathBuf {
        self.store_dir(layout).join(&job.output_path)
    }
}

fn generation_id_for(parent: &GenerationJob, text: &str, seed: u64, params: &GenParams, revision: u32) -> String {
    generation_id(&parent.dataset_id, &parent.class_id, parent.prompt_no, text, seed, params, revision)
}
