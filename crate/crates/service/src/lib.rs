//! Local HTTP API over a project directory. Backs the calibration review UI: browse
//! prompts and generations, flag them, edit prompts, queue regenerations and start
//! evaluation runs.
//!
//! Every store mutation goes through one write lock, so concurrent requests never
//! interleave read-modify-write cycles on the same manifest or prompt file.

mod error;

use std::collections::BTreeSet;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex as AsyncMutex;
use tokio::task::JoinSet;

use vizproto_pipeline::calibration::{ErrorReport, FlagRecord, FlagSubmission};
use vizproto_pipeline::eval::{dataset_error_report, run_eval, EvalOptions, EvalRun, REPORT_JSON};
use vizproto_pipeline::imagegen::{run_pending, GenerationJob, GenerationManifest, ImageGenerator};
use vizproto_pipeline::layout::{is_contained, sanitize_name};
use vizproto_pipeline::promptgen::{list_prompt_classes, load_prompts, PromptEntry, PromptSet};
use vizproto_pipeline::review::{self, DatasetSummary, PrototypeImpact, QueuedRegeneration};
use vizproto_pipeline::{PipelineError, ProjectLayout, PromptStyle, RunConfig};

pub use error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    layout: ProjectLayout,
    token: Option<String>,
    generator: Option<Arc<dyn ImageGenerator>>,
    workers: usize,
    write_lock: Arc<AsyncMutex<()>>,
    tasks: Arc<parking_lot::Mutex<JoinSet<()>>>,
}

impl AppState {
    pub fn new(layout: ProjectLayout) -> Self {
        Self {
            layout,
            token: None,
            generator: None,
            workers: 1,
            write_lock: Arc::default(),
            tasks: Arc::default(),
        }
    }

    /// Requires `Authorization: Bearer <token>` on every route.
    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    /// Without a generator, regeneration requests are queued but not executed.
    pub fn with_generator(mut self, generator: Arc<dyn ImageGenerator>) -> Self {
        self.generator = Some(generator);
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Waits for queued background regenerations to finish.
    pub async fn drain(&self) {
        loop {
            let next = {
                let mut tasks = self.tasks.lock();
                std::mem::take(&mut *tasks)
            };
            if next.is_empty() {
                return;
            }
            next.join_all().await;
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/datasets", get(list_datasets))
        .route("/api/datasets/{dataset}/classes", get(list_classes))
        .route("/api/datasets/{dataset}/errors", get(error_report))
        .route("/api/classes/{class}/prompts", get(class_prompts))
        .route("/api/classes/{class}/generations", get(class_generations))
        .route("/api/flags", post(submit_flag))
        .route("/api/flags/{flag_id}", delete(remove_flag))
        .route("/api/prompts/{class}/{no}", put(edit_prompt))
        .route("/api/regenerate/{generation_id}", post(regenerate))
        .route("/api/runs", post(start_run))
        .route("/api/runs/{run_id}", get(get_run))
        .route("/images/{*path}", get(image))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then lets in-flight regenerations finish.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    let app = router(state.clone());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    state.drain().await;
    Ok(())
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(request).await
}

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, PipelineError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Task(e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Default, Deserialize)]
struct Scope {
    dataset: Option<String>,
    #[serde(default)]
    style: PromptStyle,
}

async fn list_datasets(State(s): State<AppState>) -> ApiResult<Json<Vec<DatasetSummary>>> {
    Ok(Json(blocking(move || review::list_datasets(&s.layout)).await?))
}

fn load_manifest(layout: &ProjectLayout, style: PromptStyle, dataset: &str) -> Result<Option<GenerationManifest>, PipelineError> {
    match GenerationManifest::load(layout, style, dataset) {
        Ok(m) => Ok(Some(m)),
        Err(PipelineError::NotFound(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Serialize)]
struct ClassOverview {
    class_id: String,
    prompts: usize,
    flagged_prompts: usize,
    generations: usize,
    impact: Option<PrototypeImpact>,
}

async fn list_classes(
    State(s): State<AppState>,
    UrlPath(dataset): UrlPath<String>,
    Query(q): Query<Scope>,
) -> ApiResult<Json<Vec<ClassOverview>>> {
    let out = blocking(move || {
        let known = review::list_datasets(&s.layout)?;
        if !known.iter().any(|d| d.dataset_id == dataset) {
            return Err(PipelineError::NotFound(format!("dataset `{dataset}`")));
        }
        let manifest = load_manifest(&s.layout, q.style, &dataset)?;
        let mut ids: BTreeSet<String> = list_prompt_classes(&s.layout, q.style, &dataset)?.into_iter().collect();
        if let Some(m) = &manifest {
            ids.extend(m.classes.keys().cloned());
        }
        ids.into_iter()
            .map(|class_id| {
                let prompts = load_prompts(&s.layout, q.style, &dataset, &class_id).ok();
                Ok(ClassOverview {
                    prompts: prompts.as_ref().map_or(0, |p| p.prompts.len()),
                    flagged_prompts: prompts
                        .as_ref()
                        .map_or(0, |p| p.prompts.iter().filter(|e| e.flag.is_some()).count()),
                    generations: manifest.as_ref().map_or(0, |m| m.class_jobs(&class_id).len()),
                    impact: manifest.as_ref().map(|m| review::prototype_impact(m, &class_id)),
                    class_id,
                })
            })
            .collect()
    })
    .await?;
    Ok(Json(out))
}

async fn error_report(
    State(s): State<AppState>,
    UrlPath(dataset): UrlPath<String>,
    Query(q): Query<Scope>,
) -> ApiResult<Json<ErrorReport>> {
    Ok(Json(blocking(move || dataset_error_report(&s.layout, &dataset, q.style)).await?))
}

async fn class_prompts(
    State(s): State<AppState>,
    UrlPath(class): UrlPath<String>,
    Query(q): Query<Scope>,
) -> ApiResult<Json<PromptSet>> {
    let set = blocking(move || {
        let dataset = review::resolve_dataset(&s.layout, q.dataset.as_deref(), q.style, &class)?;
        load_prompts(&s.layout, q.style, &dataset, &class)
    })
    .await?;
    Ok(Json(set))
}

#[derive(Debug, Serialize)]
struct GenerationView {
    #[serde(flatten)]
    job: GenerationJob,
    image_url: Option<String>,
}

#[derive(Debug, Serialize)]
struct ClassGenerations {
    dataset_id: String,
    style: PromptStyle,
    class_id: String,
    impact: PrototypeImpact,
    /// True when flags currently change this class's calibrated prototype.
    calibration_changed: bool,
    generations: Vec<GenerationView>,
}

fn image_url(style: PromptStyle, dataset: &str, relative: &Path) -> String {
    let rel = relative
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/");
    format!("/images/{}/{}/{}", style.as_str(), sanitize_name(dataset), rel)
}

async fn class_generations(
    State(s): State<AppState>,
    UrlPath(class): UrlPath<String>,
    Query(q): Query<Scope>,
) -> ApiResult<Json<ClassGenerations>> {
    let out = blocking(move || {
        let dataset = review::resolve_dataset(&s.layout, q.dataset.as_deref(), q.style, &class)?;
        let manifest = GenerationManifest::load(&s.layout, q.style, &dataset)?;
        let jobs = manifest.class_jobs(&class);
        if jobs.is_empty() {
            return Err(PipelineError::NotFound(format!("generations for class `{class}` in `{dataset}`")));
        }
        let generations = jobs
            .iter()
            .map(|job| GenerationView {
                image_url: job
                    .status
                    .has_image()
                    .then(|| image_url(q.style, &dataset, &job.output_path)),
                job: (*job).clone(),
            })
            .collect();
        Ok(ClassGenerations {
            impact: review::prototype_impact(&manifest, &class),
            calibration_changed: manifest.calibration_changed(&class),
            dataset_id: dataset,
            style: q.style,
            class_id: class,
            generations,
        })
    })
    .await?;
    Ok(Json(out))
}

async fn submit_flag(
    State(s): State<AppState>,
    Query(q): Query<Scope>,
    Json(submission): Json<FlagSubmission>,
) -> ApiResult<(StatusCode, Json<FlagRecord>)> {
    let _guard = s.write_lock.clone().lock_owned().await;
    let record = blocking(move || review::submit_flag(&s.layout, q.dataset.as_deref(), q.style, &submission)).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn remove_flag(State(s): State<AppState>, UrlPath(flag_id): UrlPath<String>) -> ApiResult<StatusCode> {
    let _guard = s.write_lock.clone().lock_owned().await;
    blocking(move || review::remove_flag(&s.layout, &flag_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct PromptEdit {
    /// Replacement text; null or blank clears the replacement.
    text: Option<String>,
}

async fn edit_prompt(
    State(s): State<AppState>,
    UrlPath((class, no)): UrlPath<(String, usize)>,
    Query(q): Query<Scope>,
    Json(edit): Json<PromptEdit>,
) -> ApiResult<Json<PromptEntry>> {
    let _guard = s.write_lock.clone().lock_owned().await;
    let entry = blocking(move || {
        let dataset = review::resolve_dataset(&s.layout, q.dataset.as_deref(), q.style, &class)?;
        review::set_prompt_replacement(&s.layout, &dataset, q.style, &class, no, edit.text.as_deref())
    })
    .await?;
    Ok(Json(entry))
}

#[derive(Debug, Default, Deserialize)]
struct RegenerateBody {
    prompt_text: Option<String>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct RegenerateAccepted {
    #[serde(flatten)]
    queued: QueuedRegeneration,
    /// False when no image generator is configured; the job stays pending.
    executing: bool,
}

async fn regenerate(
    State(s): State<AppState>,
    UrlPath(generation_id): UrlPath<String>,
    body: Option<Json<RegenerateBody>>,
) -> ApiResult<(StatusCode, Json<RegenerateAccepted>)> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let queued = {
        let _guard = s.write_lock.clone().lock_owned().await;
        let layout = s.layout.clone();
        blocking(move || review::queue_regeneration(&layout, &generation_id, body.prompt_text.as_deref(), body.seed)).await?
    };
    let executing = match &s.generator {
        Some(generator) => {
            spawn_regeneration(&s, generator.clone(), &queued);
            true
        }
        None => false,
    };
    Ok((StatusCode::ACCEPTED, Json(RegenerateAccepted { queued, executing })))
}

fn spawn_regeneration(s: &AppState, generator: Arc<dyn ImageGenerator>, queued: &QueuedRegeneration) {
    let (layout, lock, workers) = (s.layout.clone(), s.write_lock.clone(), s.workers);
    let (style, dataset, job_id) = (queued.style, queued.dataset_id.clone(), queued.job.generation_id.clone());
    s.tasks.lock().spawn(async move {
        // held for the whole generation: the manifest is rewritten when the job lands
        let guard = lock.lock_owned().await;
        let id = job_id.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let _guard = guard;
            let mut manifest = GenerationManifest::load(&layout, style, &dataset)?;
            run_pending(&mut manifest, &layout, generator.as_ref(), workers, Some(&[id]))
        })
        .await;
        match outcome {
            Ok(Ok(summary)) if summary.failed.is_empty() => log::info!("regeneration {job_id} done"),
            Ok(Ok(_)) => log::warn!("regeneration {job_id} failed; see the manifest entry"),
            Ok(Err(e)) => log::error!("regeneration {job_id}: {e}"),
            Err(e) => log::error!("regeneration {job_id}: {e}"),
        }
    });
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    #[serde(default = "default_true")]
    pair_baseline: bool,
}

fn default_true() -> bool {
    true
}

async fn start_run(
    State(s): State<AppState>,
    Query(q): Query<RunQuery>,
    Json(config): Json<RunConfig>,
) -> ApiResult<Json<EvalRun>> {
    let options = EvalOptions {
        pair_baseline: q.pair_baseline,
    };
    Ok(Json(blocking(move || run_eval(&s.layout, &config, options)).await?))
}

/// The stored `report.json`, byte for byte.
async fn get_run(State(s): State<AppState>, UrlPath(run_id): UrlPath<String>) -> ApiResult<Response> {
    if !is_contained(Path::new(&run_id)) || run_id.contains('/') {
        return Err(PipelineError::Invalid(format!("bad run id `{run_id}`")).into());
    }
    let path = s.layout.run_dir(&run_id).join(REPORT_JSON);
    let bytes = read_file(path, format!("run `{run_id}`")).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

/// Read-only access to generated images (including archived ones under `audit/`).
async fn image(State(s): State<AppState>, UrlPath(path): UrlPath<String>) -> ApiResult<Response> {
    let rel = PathBuf::from(&path);
    if !is_contained(&rel) {
        return Err(PipelineError::NotFound(format!("image `{path}`")).into());
    }
    let mime = match rel.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => return Err(PipelineError::NotFound(format!("image `{path}`")).into()),
    };
    let bytes = read_file(s.layout.root().join("generated").join(rel), format!("image `{path}`")).await?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn read_file(path: PathBuf, what: String) -> ApiResult<Vec<u8>> {
    match tokio::fs::read(&path).await {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::NotFound(what).into()),
        Err(e) => Err(PipelineError::Io { path, source: e }.into()),
    }
}
