//! Evaluation runs: asset validation, feature extraction, prototypes, scoring and the
//! per-run output directory.

mod ablation;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vizproto_core::{
    accuracy, build_prototype, make_schedule, open_encoder, predict, score_all, Accuracy, AggregateMode,
    ClassPrototype, Encoder, EncoderRegistry, FeatureCache, FeatureExtractor, ImageRecord, ImageSource,
};

pub use ablation::{config_diff, run_ablation_grid, AblationGrid, AblationRow, ABLATION_LABELS};
pub use report::{backend_label, format_delta_row, render_report};

use crate::calibration::{collect_error_items, error_stats, ErrorReport};
use crate::config::{PromptStyle, RunConfig};
use crate::dataset::{ingest_dataset, DatasetManifest};
use crate::error::{AssetGap, PipelineError, Result};
use crate::imagegen::{GenerationJob, GenerationManifest};
use crate::layout::{read_json, write_atomic, write_json, ProjectLayout};
use crate::promptgen::{list_prompt_classes, load_prompts};

pub const CONFIG_FILE: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.json";

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    #[serde(rename = "true")]
    pub true_class: String,
    pub predicted: String,
    pub score: f64,
    /// Best minus runner-up score; absent with a single class.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: String,
    /// Generated images averaged into the prototype.
    pub source_count: usize,
    /// Generation ids left out by calibration.
    pub excluded: Vec<String>,
    /// Shortfall against `n_g`; non-zero values are also listed under `deficits`.
    pub deficit: usize,
}

/// Another run this one is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub run_id: String,
    pub overall: f64,
    pub macro_avg: f64,
    /// `this run − compared run`, in accuracy units.
    pub delta_overall: f64,
    pub delta_macro: f64,
}

impl Comparison {
    fn between(label: &str, ours: &EvalRun, other: &EvalRun) -> Self {
        Self {
            label: label.to_owned(),
            run_id: other.run_id.clone(),
            overall: other.accuracy.overall,
            macro_avg: other.accuracy.macro_avg,
            delta_overall: ours.accuracy.overall - other.accuracy.overall,
            delta_macro: ours.accuracy.macro_avg - other.accuracy.macro_avg,
        }
    }
}

/// Wall-clock numbers; kept out of `report.json` so reports stay byte-stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub extract_ms: u128,
    pub score_ms: u128,
    pub total_ms: u128,
    /// Encoder invocations; zero when every feature came from the cache.
    pub encode_calls: usize,
    pub real_images: usize,
    pub generated_images: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub run_id: String,
    pub label: String,
    pub config: RunConfig,
    pub feature_dim: usize,
    pub schedule_digest: String,
    pub score_digest: String,
    pub accuracy: Accuracy,
    pub classes: Vec<ClassSummary>,
    pub deficits: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncorrected: Option<Comparison>,
    pub error_stats: ErrorReport,
    #[serde(skip)]
    pub timing: Timing,
}

impl EvalRun {
    pub fn class(&self, class_id: &str) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Also run the baseline-prompt, single-scale arm and report Δ against it.
    pub pair_baseline: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { pair_baseline: true }
    }
}

struct ClassAssets {
    class_id: String,
    sources: Vec<GenerationJob>,
    excluded: BTreeSet<usize>,
}

struct Assets {
    dataset: DatasetManifest,
    generation: GenerationManifest,
    classes: Vec<ClassAssets>,
}

fn load_generation(layout: &ProjectLayout, style: PromptStyle, dataset_id: &str) -> Result<Option<GenerationManifest>> {
    match GenerationManifest::load(layout, style, dataset_id) {
        Ok(m) => Ok(Some(m)),
        Err(PipelineError::NotFound(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Collects every missing input for `config` before any work is done.
fn gather_assets(layout: &ProjectLayout, config: &RunConfig) -> Result<Assets> {
    let d = &config.dataset_id;
    let gap = |class_id: Option<&str>, missing: String| AssetGap {
        dataset_id: d.clone(),
        class_id: class_id.map(str::to_owned),
        missing,
    };
    let mut gaps = Vec::new();

    let dataset_dir = layout.dataset_dir(d);
    let dataset = if dataset_dir.is_dir() {
        let m = ingest_dataset(&dataset_dir, d)?;
        if m.classes.is_empty() {
            gaps.push(gap(None, format!("no class directories under {}", dataset_dir.display())));
        }
        for c in &m.empty_classes {
            gaps.push(gap(Some(c), format!("no real images in {}", dataset_dir.join(c).display())));
        }
        Some(m)
    } else {
        gaps.push(gap(None, format!("real image directory {}", dataset_dir.display())));
        None
    };

    let generation = load_generation(layout, config.prompt_style, d)?;
    if generation.is_none() {
        gaps.push(gap(
            None,
            format!(
                "generated images ({} prompts): {} (run gen-prompts and gen-images)",
                config.prompt_style,
                GenerationManifest::path(layout, config.prompt_style, d).display()
            ),
        ));
    }

    let mut classes = Vec::new();
    if let (Some(dataset), Some(generation)) = (&dataset, &generation) {
        for class in &dataset.classes {
            let id = class.class_id.as_str();
            let (sources, excluded) = if config.calibration_applied {
                generation.sources_with_exclusions(id)
            } else {
                (generation.sources(id, false), BTreeSet::new())
            };
            if sources.is_empty() {
                let pending = generation.class_jobs(id).len();
                gaps.push(gap(
                    Some(id),
                    if pending == 0 {
                        format!("no generation jobs (expected {})", config.n_g)
                    } else {
                        format!("no completed generations ({pending} planned, expected {})", config.n_g)
                    },
                ));
                continue;
            }
            for job in &sources {
                let path = generation.image_path(layout, job);
                if !path.is_file() {
                    gaps.push(gap(Some(id), format!("generated image {}", path.display())));
                }
            }
            classes.push(ClassAssets {
                class_id: id.to_owned(),
                sources: sources.into_iter().cloned().collect(),
                excluded,
            });
        }
        for extra in generation.classes.keys().filter(|c| dataset.class(c).is_none()) {
            log::warn!("{d}: generated class `{extra}` has no real-image directory; ignored");
        }
    }

    if !gaps.is_empty() {
        return Err(PipelineError::MissingAssets(gaps));
    }
    Ok(Assets {
        dataset: dataset.expect("checked above"),
        generation: generation.expect("checked above"),
        classes,
    })
}

pub fn open_backend(layout: &ProjectLayout, backend_id: &str) -> Result<Box<dyn Encoder>> {
    let registry = EncoderRegistry::load(&layout.encoder_registry())?;
    let manifest = registry.resolve(backend_id)?;
    Ok(open_encoder(&manifest)?)
}

fn open_cache(layout: &ProjectLayout, config: &RunConfig, dim: usize) -> Result<FeatureCache> {
    let cache = FeatureCache::open(layout.cache_file(&config.dataset_id, &config.backend_id), dim)?;
    if let Some(problem) = cache.load_error() {
        log::warn!("feature cache: {problem}; unreadable entries will be recomputed");
    }
    Ok(cache)
}

fn generated_record(layout: &ProjectLayout, generation: &GenerationManifest, job: &GenerationJob) -> Result<ImageRecord> {
    let path = generation.image_path(layout, job);
    let mut record = ImageRecord::probe(
        format!("gen/{}/{}", generation.style, job.generation_id),
        ImageSource::Generated,
        &path,
        &job.class_id,
    )?;
    record.generation_id = Some(job.generation_id.clone());
    Ok(record)
}

fn prototype_variant(config: &RunConfig) -> String {
    format!(
        "{}-s{}-{}-{}",
        config.prompt_style,
        config.n_scales,
        if config.calibration_applied { "cal" } else { "unc" },
        AggregateMode::from_raw_flag(config.raw_aggregate).as_str()
    )
}

struct Computed {
    run: EvalRun,
    predictions: Vec<PredictionLine>,
    prototypes: Vec<ClassPrototype>,
}

/// Extracts (or loads from cache) everything `config` needs and builds prototypes.
fn compute(layout: &ProjectLayout, config: &RunConfig) -> Result<Computed> {
    let started = Instant::now();
    let assets = gather_assets(layout, config)?;
    let encoder = open_backend(layout, &config.backend_id)?;
    let dim = encoder.manifest().feature_dim;
    let cache = open_cache(layout, config, dim)?;
    let mode = AggregateMode::from_raw_flag(config.raw_aggregate);
    let schedule = make_schedule(config.n_scales)?;
    let extractor = FeatureExtractor::new(encoder.as_ref(), schedule, mode).with_cache(&cache);

    let real = &assets.dataset.images;
    let real_features = extractor.extract_all(real)?;
    let mut generated_records = Vec::new();
    for class in &assets.classes {
        for job in &class.sources {
            generated_records.push(generated_record(layout, &assets.generation, job)?);
        }
    }
    let generated_features = extractor.extract_all(&generated_records)?;
    cache.save()?;
    let extract_ms = started.elapsed().as_millis();

    let score_started = Instant::now();
    let mut prototypes = Vec::with_capacity(assets.classes.len());
    let mut classes = Vec::with_capacity(assets.classes.len());
    let mut deficits = Vec::new();
    let mut offset = 0;
    for class in &assets.classes {
        let features = &generated_features[offset..offset + class.sources.len()];
        offset += class.sources.len();
        let proto = build_prototype(&class.class_id, features, &class.excluded, mode)?;
        let deficit = config.n_g.saturating_sub(proto.source_count);
        if deficit > 0 {
            let msg = format!(
                "{}: {} of {} generated images usable",
                class.class_id, proto.source_count, config.n_g
            );
            log::warn!("{}: {msg}", config.dataset_id);
            deficits.push(msg);
        }
        classes.push(ClassSummary {
            class_id: class.class_id.clone(),
            source_count: proto.source_count,
            excluded: class.excluded.iter().map(|&i| class.sources[i].generation_id.clone()).collect(),
            deficit,
        });
        prototypes.push(proto);
    }

    let test_ids: Vec<String> = real.iter().map(|r| r.image_id.clone()).collect();
    let scores = score_all(&test_ids, &real_features, &prototypes)?;
    let predicted = predict(&scores);
    let truth: HashMap<String, String> = real.iter().map(|r| (r.image_id.clone(), r.class_id.clone())).collect();
    let acc = accuracy(&predicted, &truth)?;
    let predictions = predicted
        .iter()
        .map(|p| PredictionLine {
            image_id: p.test_image_id.clone(),
            true_class: truth[&p.test_image_id].clone(),
            predicted: p.predicted_class.clone(),
            score: p.score,
            margin: p.margin(),
        })
        .collect();

    let prompt_sets = list_prompt_classes(layout, config.prompt_style, &config.dataset_id)?
        .iter()
        .filter_map(|c| load_prompts(layout, config.prompt_style, &config.dataset_id, c).ok())
        .collect::<Vec<_>>();
    let (prompt_flags, image_flags) = collect_error_items(&prompt_sets, Some(&assets.generation));
    let score_ms = score_started.elapsed().as_millis();

    let run = EvalRun {
        run_id: config.run_id(),
        label: config.ablation_label().to_owned(),
        config: config.clone(),
        feature_dim: dim,
        schedule_digest: extractor.schedule().digest(),
        score_digest: scores.digest(),
        accuracy: acc,
        classes,
        deficits,
        baseline: None,
        uncorrected: None,
        error_stats: error_stats(&prompt_flags, &image_flags),
        timing: Timing {
            extract_ms,
            score_ms,
            total_ms: started.elapsed().as_millis(),
            encode_calls: extractor.encode_calls(),
            real_images: real.len(),
            generated_images: generated_records.len(),
        },
    };
    Ok(Computed {
        run,
        predictions,
        prototypes,
    })
}

fn predictions_jsonl(lines: &[PredictionLine]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut out, line).map_err(PipelineError::json(PREDICTIONS_FILE))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_predictions(layout: &ProjectLayout, run_id: &str) -> Result<Vec<PredictionLine>> {
    let path = layout.run_dir(run_id).join(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PipelineError::json(&path)))
        .collect()
}

/// Recomputes overall and macro accuracy from the persisted predictions and compares
/// them with the report.
pub fn verify_run(layout: &ProjectLayout, run: &EvalRun) -> Result<()> {
    let lines = read_predictions(layout, &run.run_id)?;
    if lines.len() != run.accuracy.n_test {
        return Err(PipelineError::Inconsistent(format!(
            "{}: {} predictions persisted, report counts {}",
            run.run_id,
            lines.len(),
            run.accuracy.n_test
        )));
    }
    let correct = lines.iter().filter(|l| l.true_class == l.predicted).count();
    let overall = correct as f64 / lines.len() as f64;
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for l in &lines {
        let e = per_class.entry(&l.true_class).or_default();
        e.0 += usize::from(l.true_class == l.predicted);
        e.1 += 1;
    }
    let macro_avg = per_class.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per_class.len() as f64;
    const TOL: f64 = 1e-12;
    if (overall - run.accuracy.overall).abs() > TOL || (macro_avg - run.accuracy.macro_avg).abs() > TOL {
        return Err(PipelineError::Inconsistent(format!(
            "{}: predictions give overall {overall} / macro {macro_avg}, report says {} / {}",
            run.run_id, run.accuracy.overall, run.accuracy.macro_avg
        )));
    }
    Ok(())
}

fn write_outputs(layout: &ProjectLayout, computed: &Computed) -> Result<()> {
    let run = &computed.run;
    let dir = layout.run_dir(&run.run_id);
    fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    write_json(&dir.join(CONFIG_FILE), &run.config)?;
    write_atomic(&dir.join(PREDICTIONS_FILE), &predictions_jsonl(&computed.predictions)?)?;
    write_json(&dir.join(REPORT_JSON), run)?;
    write_atomic(&dir.join(REPORT_TXT), render_report(run).as_bytes())?;
    write_json(&dir.join(TIMING_FILE), &run.timing)?;
    write_json(
        &layout.prototype_file(&run.config.dataset_id, &run.config.backend_id, &prototype_variant(&run.config)),
        &computed.prototypes,
    )?;
    verify_run(layout, run)
}

/// Runs one configuration and writes `runs/<run_id>/`. Calibrated runs also produce
/// their uncorrected counterpart; with `pair_baseline`, the baseline arm is run too
/// when its generated images exist.
pub fn run_eval(layout: &ProjectLayout, config: &RunConfig, options: EvalOptions) -> Result<EvalRun> {
    let config = config.clone().normalized()?;
    let mut main = compute(layout, &config)?;

    if config.calibration_applied {
        let unc = compute(layout, &config.uncorrected())?;
        write_outputs(layout, &unc)?;
        main.run.uncorrected = Some(Comparison::between("uncorrected", &main.run, &unc.run));
    }

    let baseline_config = config.baseline_arm();
    if options.pair_baseline && baseline_config != config {
        match compute(layout, &baseline_config) {
            Ok(base) => {
                write_outputs(layout, &base)?;
                main.run.baseline = Some(Comparison::between(base.run.label.as_str(), &main.run, &base.run));
            }
            Err(PipelineError::MissingAssets(gaps)) => {
                log::warn!(
                    "no paired baseline for {}: {} missing asset(s), first: {}",
                    config.run_id(),
                    gaps.len(),
                    gaps[0]
                );
            }
            Err(e) => return Err(e),
        }
    }

    write_outputs(layout, &main)?;
    Ok(main.run)
}

/// `report.json` of a finished run.
pub fn load_run(layout: &ProjectLayout, run_id: &str) -> Result<EvalRun> {
    let path = layout.run_dir(run_id).join(REPORT_JSON);
    if !path.is_file() {
        return Err(PipelineError::NotFound(format!("run `{run_id}`")));
    }
    let mut run: EvalRun = read_json(&path)?;
    let timing = layout.run_dir(run_id).join(TIMING_FILE);
    if timing.is_file() {
        run.timing = read_json(&timing)?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub real_images: usize,
    pub generated_images: usize,
    pub encode_calls: usize,
    pub cache_entries: usize,
}

/// Fills the feature cache for `config` without scoring.
pub fn extract_features(layout: &ProjectLayout, config: &RunConfig, include_real: bool, include_generated: bool) -> Result<ExtractSummary> {
    let config = config.clone().normalized()?;
    let assets = gather_assets(layout, &config)?;
    let encoder = open_backend(layout, &config.backend_id)?;
    let cache = open_cache(layout, &config, encoder.manifest().feature_dim)?;
    let extractor = FeatureExtractor::new(
        encoder.as_ref(),
        make_schedule(config.n_scales)?,
        AggregateMode::from_raw_flag(config.raw_aggregate),
    )
    .with_cache(&cache);
    let mut summary = ExtractSummary::default();
    if include_real {
        summary.real_images = extractor.extract_all(&assets.dataset.images)?.len();
    }
    if include_generated {
        let records = assets
            .classes
            .iter()
            .flat_map(|c| c.sources.iter())
            .map(|job| generated_record(layout, &assets.generation, job))
            .collect::<Result<Vec<_>>>()?;
        summary.generated_images = extractor.extract_all(&records)?.len();
    }
    cache.save()?;
    summary.encode_calls = extractor.encode_calls();
    summary.cache_entries = cache.len();
    Ok(summary)
}

/// Builds and persists the prototypes for `config`.
pub fn build_prototypes(layout: &ProjectLayout, config: &RunConfig) -> Result<(Vec<ClassPrototype>, Vec<ClassSummary>)> {
    let config = config.clone().normalized()?;
    let computed = compute(layout, &config)?;
    write_json(
        &layout.prototype_file(&config.dataset_id, &config.backend_id, &prototype_variant(&config)),
        &computed.prototypes,
    )?;
    Ok((computed.prototypes, computed.run.classes))
}

/// Classifies arbitrary image files against the prototypes of `config`. Images are
/// encoded directly, without touching the feature cache.
pub fn classify_images(layout: &ProjectLayout, config: &RunConfig, paths: &[std::path::PathBuf]) -> Result<Vec<vizproto_core::Prediction>> {
    let config = config.clone().normalized()?;
    let (prototypes, _) = build_prototypes(layout, &config)?;
    let encoder = open_backend(layout, &config.backend_id)?;
    let extractor = FeatureExtractor::new(
        encoder.as_ref(),
        make_schedule(config.n_scales)?,
        AggregateMode::from_raw_flag(config.raw_aggregate),
    );
    let ids: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let features = paths
        .iter()
        .zip(&ids)
        .map(|(path, id)| {
            let img = vizproto_core::encoder::load_rgb(path)?;
            Ok(extractor.extract_image(id, &img)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(predict(&score_all(&ids, &features, &prototypes)?))
}

/// Error statistics over every stored prompt flag and generation flag of a dataset.
pub fn dataset_error_report(layout: &ProjectLayout, dataset_id: &str, style: PromptStyle) -> Result<ErrorReport> {
    let prompt_sets = list_prompt_classes(layout, style, dataset_id)?
        .iter()
        .map(|c| load_prompts(layout, style, dataset_id, c))
        .collect::<Result<Vec<_>>>()?;
    let generation = load_generation(layout, style, dataset_id)?;
    if prompt_sets.is_empty() && generation.is_none() {
        return Err(PipelineError::NotFound(format!(
            "no prompts or generations for dataset `{dataset_id}` ({style})"
        )));
    }
    let (prompts, images) = collect_error_items(&prompt_sets, generation.as_ref());
    Ok(error_stats(&prompts, &images))
}
