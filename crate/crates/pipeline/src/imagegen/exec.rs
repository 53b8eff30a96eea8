use std::fs;
use std::path::{Path, PathBuf};

use image::ImageFormat;
use serde::Serialize;

use super::{GenerateRequest, GenerationJob, GenerationManifest, ImageGenerator, JobStatus};
use crate::error::{PipelineError, Result};
use crate::layout::{write_atomic, write_json, ProjectLayout};

/// Superseded images are moved here, relative to the store directory.
pub const AUDIT_DIR: &str = "audit";

fn audit_path(generation_id: &str) -> PathBuf {
    Path::new(AUDIT_DIR).join(format!("{generation_id}.png"))
}

fn to_png(bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let format = image::guess_format(&bytes).map_err(|e| e.to_string())?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| e.to_string())?;
    if format == ImageFormat::Png {
        return Ok(bytes);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Runs one job and writes `<class>/<No.>.png` plus a `<No.>.json` sidecar under
/// `store_dir`. Endpoint failures come back as a `Failed` job, not as `Err`; `Err` is
/// reserved for local I/O problems.
///
/// For a regeneration, the image currently in the slot is moved to the audit
/// directory before the new one is written.
pub fn execute(generator: &dyn ImageGenerator, store_dir: &Path, job: &GenerationJob) -> Result<GenerationJob> {
    let mut job = job.clone();
    let request = GenerateRequest {
        prompt: job.prompt_text.clone(),
        seed: job.seed,
        guidance_scale: job.guidance_scale,
        num_inference_steps: job.num_inference_steps,
        width: job.width,
        height: job.height,
    };
    let png = match generator.generate(&request) {
        Ok(bytes) => to_png(bytes).map_err(|e| super::GenError::InvalidImage(e).to_string()),
        Err(e) => Err(e.to_string()),
    };
    let png = match png {
        Ok(png) => png,
        Err(message) => {
            log::warn!("generation {} failed: {message}", job.generation_id);
            job.status = JobStatus::Failed;
            job.error = Some(message);
            return Ok(job);
        }
    };
    let slot = store_dir.join(job.slot_path());
    if let Some(parent_id) = &job.parent {
        if slot.exists() {
            let archived = store_dir.join(audit_path(parent_id));
            if let Some(dir) = archived.parent() {
                fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
            }
            fs::rename(&slot, &archived).map_err(PipelineError::io(&slot))?;
        }
    }
    write_atomic(&slot, &png)?;
    job.status = JobStatus::Done;
    job.error = None;
    job.output_path = job.slot_path();
    write_json(&store_dir.join(job.sidecar_path()), &job)?;
    Ok(job)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionSummary {
    pub done: Vec<String>,
    pub failed: Vec<String>,
}

/// Executes pending jobs (all of them, or those in `only`) on up to `workers` threads,
/// then records the results in the manifest and saves it once.
pub fn run_pending(
    manifest: &mut GenerationManifest,
    layout: &ProjectLayout,
    generator: &dyn ImageGenerator,
    workers: usize,
    only: Option<&[String]>,
) -> Result<ExecutionSummary> {
    use rayon::prelude::*;

    let store = manifest.store_dir(layout);
    let pending: Vec<GenerationJob> = manifest
        .jobs()
        .filter(|j| j.status == JobStatus::Pending)
        .filter(|j| only.is_none_or(|ids| ids.contains(&j.generation_id)))
        .cloned()
        .collect();
    // two jobs for the same slot would race on the slot file
    let mut slots = std::collections::BTreeSet::new();
    for job in &pending {
        if !slots.insert((job.class_id.clone(), job.prompt_no)) {
            return Err(PipelineError::Invalid(format!(
                "more than one pending job for {}/{}",
                job.class_id, job.prompt_no
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<GenerationJob>> =
        pool.install(|| pending.par_iter().map(|job| execute(generator, &store, job)).collect());

    let mut summary = ExecutionSummary::default();
    let mut first_error = None;
    for result in results {
        let job = match result {
            Ok(job) => job,
            Err(e) => {
                first_error.get_or_insert(e);
                continue;
            }
        };
        if job.status == JobStatus::Done {
            summary.done.push(job.generation_id.clone());
            if let Some(parent_id) = &job.parent {
                if let Some(parent) = manifest.job_mut(parent_id) {
                    if parent.status.has_image() {
                        parent.status = JobStatus::Regenerated;
                        parent.output_path = audit_path(parent_id);
                    }
                }
            }
        } else {
            summary.failed.push(job.generation_id.clone());
        }
        let id = job.generation_id.clone();
        if let Some(slot) = manifest.job_mut(&id) {
            *slot = job;
        }
    }
    manifest.save(layout)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PromptStyle;
    use crate::imagegen::tests::prompt_set;
    use crate::imagegen::{plan_jobs, GenError, GenParams, StubImageGenerator};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn small() -> GenParams {
        GenParams {
            width: 8,
            height: 8,
            ..GenParams::default()
        }
    }

    fn planned(layout: &ProjectLayout, n: usize) -> GenerationManifest {
        let mut m = GenerationManifest::new("PET", PromptStyle::CoarseToFine, "stub-solid", 5);
        m.set_plan("Boxer", plan_jobs(&prompt_set("PET", "Boxer", n), 5, &small()).unwrap());
        m.save(layout).unwrap();
        m
    }

    #[test]
    fn executes_and_writes_store_layout() {
        let dir = tempfile::tempdir().unwrap();
        let layout = ProjectLayout::new(dir.path());
        let mut m = planned(&layout, 4);
        let summary = run_pending(&mut m, &layout, &StubImageGenerator::solid(), 2, None).unwrap();
        assert_eq!(summary.done.len(), 4);
        let store = dir.path().join("generated/coarse_to_fine/PET");
        for no in 1..=4 {
            let img = image::open(store.join(format!("Boxer/{no}.png"))).unwrap();
            assert_eq!((img.width(), img.height()), (8, 8));
            let sidecar: GenerationJob =
                crate::layout::read_json(&store.join(format!("Boxer/{no}.json"))).unwrap();
            assert_eq!(sidecar.status, JobStatus::Done);
            assert_eq!(sidecar.guidance_scale, 7.5);
        }
        let reloaded = GenerationManifest::load(&layout, PromptStyle::CoarseToFine, "PET").unwrap();
        assert_eq!(reloaded, m);
        assert!(m.jobs().all(|j| j.status == JobStatus::Done));
    }

    #[test]
    fn endpoint_failure_marks_job_failed() {
        let dir = tempfile::tempdir().unwrap();
        let layout = ProjectLayout::new(dir.path());
        let mut m = planned(&layout, 3);
        let failing = StubImageGenerator::new("broken", |req| {
            if req.prompt.ends_with("variant 2") {
                Err(GenError::Status { status: 500, body: "oom".into() })
            } else {
                StubImageGenerator::solid_image(req)
            }
        });
        let summary = run_pending(&mut m, &layout, &failing, 1, None).unwrap();
        assert_eq!((summary.done.len(), summary.failed.len()), (2, 1));
        let failed = m.jobs().find(|j| j.status == JobStatus::Failed).unwrap();
        assert!(failed.error.as_deref().unwrap().contains("oom"));
        // a failed job can be re-queued
        let child = m.queue_regeneration(&failed.generation_id.clone(), None, None).unwrap();
        run_pending(&mut m, &layout, &StubImageGenerator::solid(), 1, None).unwrap();
        assert_eq!(m.job(&child).unwrap().status, JobStatus::Done);
        assert_eq!(m.sources("Boxer", true).len(), 3);
        assert_eq!(m.sources("Boxer", false).len(), 2);
    }

    #[test]
    fn regeneration_archives_parent_image() {
        let dir = tempfile::tempdir().unwrap();
        let layout = ProjectLayout::new(dir.path());
        let mut m = planned(&layout, 2);
        run_pending(&mut m, &layout, &StubImageGenerator::solid(), 1, None).unwrap();
        let parent = m.class_jobs("Boxer")[0].clone();
        let store = m.store_dir(&layout);
        let before = fs::read(store.join("Boxer/1.png")).unwrap();

        m.job_mut(&parent.generation_id).unwrap().status = JobStatus::Flagged;
        let child = m.queue_regeneration(&parent.generation_id, None, None).unwrap();
        run_pending(&mut m, &layout, &StubImageGenerator::solid(), 1, None).unwrap();

        let archived = store.join(AUDIT_DIR).join(format!("{}.png", parent.generation_id));
        assert_eq!(fs::read(&archived).unwrap(), before);
        assert_ne!(fs::read(store.join("Boxer/1.png")).unwrap(), before);
        let p = m.job(&parent.generation_id).unwrap();
        assert_eq!(p.status, JobStatus::Regenerated);
        assert_eq!(store.join(&p.output_path), archived);
        assert_eq!(m.job(&child).unwrap().status, JobStatus::Done);
    }

    #[test]
    fn workers_bound_parallelism() {
        let dir = tempfile::tempdir().unwrap();
        let layout = ProjectLayout::new(dir.path());
        let mut m = planned(&layout, 8);
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, p) = (live.clone(), peak.clone());
        let gen = StubImageGenerator::new("slow", move |req| {
            let now = l.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(10));
            l.fetch_sub(1, Ordering::SeqCst);
            StubImageGenerator::solid_image(req)
        });
        run_pending(&mut m, &layout, &gen, 2, None).unwrap();
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn non_png_output_is_converted() {
        struct Jpeg;
        impl ImageGenerator for Jpeg {
            fn engine_id(&self) -> String {
                "jpeg".into()
            }
            fn generate(&self, _: &GenerateRequest) -> std::result::Result<Vec<u8>, GenError> {
                let mut out = std::io::Cursor::new(Vec::new());
                image::RgbImage::new(4, 4).write_to(&mut out, ImageFormat::Jpeg).unwrap();
                Ok(out.into_inner())
            }
        }
        struct Garbage;
        impl ImageGenerator for Garbage {
            fn engine_id(&self) -> String {
                "garbage".into()
            }
            fn generate(&self, _: &GenerateRequest) -> std::result::Result<Vec<u8>, GenError> {
                Ok(b"not an image".to_vec())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let layout = ProjectLayout::new(dir.path());
        let m = planned(&layout, 1);
        let store = m.store_dir(&layout);
        let job = m.class_jobs("Boxer")[0].clone();
        let done = execute(&Jpeg, &store, &job).unwrap();
        assert_eq!(done.status, JobStatus::Done);
        assert_eq!(image::guess_format(&fs::read(store.join("Boxer/1.png")).unwrap()).unwrap(), ImageFormat::Png);
        let bad = execute(&Garbage, &store, &job).unwrap();
        assert_eq!(bad.status, JobStatus::Failed);
    }
}
