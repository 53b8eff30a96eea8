//! `vizproto`: command-line front end for the prototype classification pipeline.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use vizproto_pipeline::calibration::{FlagCategory, FlagSubmission, FlagTarget};
use vizproto_pipeline::config::ConfigFile;
use vizproto_pipeline::dataset::ingest_dataset;
use vizproto_pipeline::eval::{
    build_prototypes, classify_images, dataset_error_report, extract_features, format_delta_row, render_report,
    run_ablation_grid, run_eval, EvalOptions,
};
use vizproto_pipeline::imagegen::{plan_jobs, run_pending, GenParams, GenerationManifest, HttpImageGenerator, ImageGenerator};
use vizproto_pipeline::promptgen::{baseline_prompt_set, load_prompts, store_prompts, HttpChatProvider, PromptSession};
use vizproto_pipeline::review;
use vizproto_pipeline::{PipelineError, ProjectLayout, PromptStyle, Result, RunConfig, Settings};
use vizproto_service::AppState;

#[derive(Debug, Parser)]
#[command(name = "vizproto", version, about = "Zero-shot image classification with generated visual prototypes")]
struct Cli {
    /// Project root holding datasets/, prompts/, generated/, cache/ and runs/.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Worker threads for feature extraction and image generation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON config file; also accepts a bare run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Run fields; any given flag overrides the config file.
#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    /// Number of scales N; 1 disables multi-scale extraction.
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    style: Option<PromptStyle>,
    /// Use calibrated prototype sources (flagged images excluded).
    #[arg(long)]
    calibrated: bool,
    /// Skip renormalizing the multi-scale aggregate.
    #[arg(long)]
    raw: bool,
    /// Generated images per class.
    #[arg(long)]
    n_g: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write prompts for every class of a dataset.
    GenPrompts {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "coarse_to_fine")]
        style: PromptStyle,
        #[arg(long)]
        n_g: Option<usize>,
    },
    /// Plan and run image generation from stored prompts.
    GenImages {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "coarse_to_fine")]
        style: PromptStyle,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        guidance_scale: Option<f64>,
        #[arg(long)]
        steps: Option<u32>,
    },
    /// Fill the feature cache.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        include_real: bool,
        #[arg(long)]
        include_generated: bool,
    },
    /// Compute and store class prototypes.
    BuildPrototypes {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Classify image files against a dataset's prototypes.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate on the real test images and write a run directory.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Do not run the paired text-template baseline.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Prompt source × multi-scale grid over one or more backends.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        backends: Vec<String>,
    },
    /// Prompt and image error statistics from review flags.
    Errors {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "coarse_to_fine")]
        style: PromptStyle,
    },
    /// Serve the review API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Flag a generation (`--generation`) or a prompt (`--class` + `--prompt-no`).
    Flag {
        #[arg(long, conflicts_with_all = ["class", "prompt_no"])]
        generation: Option<String>,
        #[arg(long, requires = "prompt_no")]
        class: Option<String>,
        #[arg(long, requires = "class")]
        prompt_no: Option<usize>,
        #[arg(long, value_parser = parse_category)]
        category: FlagCategory,
        #[arg(long)]
        note: Option<String>,
        #[arg(long, default_value = "anonymous")]
        reviewer: String,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "coarse_to_fine")]
        style: PromptStyle,
    },
    /// Remove a flag by id.
    Unflag { flag_id: String },
    /// Set or clear the replacement text of a prompt.
    EditPrompt {
        #[arg(long)]
        class: String,
        #[arg(long)]
        prompt_no: usize,
        #[arg(long, required_unless_present = "clear")]
        text: Option<String>,
        #[arg(long)]
        clear: bool,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "coarse_to_fine")]
        style: PromptStyle,
    },
    /// Queue a regeneration of a flagged or failed image and run it.
    Regenerate {
        generation_id: String,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only queue the job.
        #[arg(long)]
        no_run: bool,
    },
}

fn parse_category(s: &str) -> std::result::Result<FlagCategory, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown category `{s}` (expected wrong_category or poor_composition)"))
}

struct Ctx {
    settings: Settings,
    file: ConfigFile,
    layout: ProjectLayout,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut settings = Settings::from_env();
        let file = match &cli.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        settings.apply_file(&file);
        if let Some(root) = &cli.root {
            settings.root = root.clone();
        }
        if cli.workers.is_some() {
            settings.workers = cli.workers;
        }
        let layout = ProjectLayout::new(&settings.root);
        Ok(Self { settings, file, layout })
    }

    fn workers(&self) -> usize {
        self.settings
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    fn run_config(&self, args: &RunArgs) -> Result<RunConfig> {
        let mut fallback = RunConfig::new("", "");
        fallback.n_g = self.settings.n_g;
        let mut c = self.file.run_config(&fallback);
        if let Some(d) = &args.dataset {
            c.dataset_id = d.clone();
        }
        if let Some(b) = &args.backend {
            c.backend_id = b.clone();
        }
        if let Some(n) = args.scales {
            c.n_scales = n;
            c.multiscale_enabled = n > 1;
        }
        if let Some(s) = args.style {
            c.prompt_style = s;
        }
        if let Some(n) = args.n_g {
            c.n_g = n;
        }
        c.calibration_applied |= args.calibrated;
        c.raw_aggregate |= args.raw;
        if c.dataset_id.is_empty() {
            return Err(PipelineError::Invalid("no dataset given (--dataset or config file)".into()));
        }
        if c.backend_id.is_empty() {
            return Err(PipelineError::Invalid("no backend given (--backend or config file)".into()));
        }
        c.normalized()
    }

    fn generator(&self) -> Result<HttpImageGenerator> {
        Ok(HttpImageGenerator::from_settings(&self.settings.t2i)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::load(&cli)?;
    if let Some(n) = ctx.settings.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match cli.command {
        Command::GenPrompts { dataset, style, n_g } => gen_prompts(&ctx, &dataset, style, n_g.unwrap_or(ctx.settings.n_g)),
        Command::GenImages {
            dataset,
            style,
            seed,
            guidance_scale,
            steps,
        } => gen_images(&ctx, &dataset, style, seed, guidance_scale, steps),
        Command::Extract {
            run,
            include_real,
            include_generated,
        } => {
            let config = ctx.run_config(&run)?;
            let both = !include_real && !include_generated;
            let s = extract_features(&ctx.layout, &config, include_real || both, include_generated || both)?;
            println!(
                "real {} / generated {} images; {} encoder calls; {} cache entries",
                s.real_images, s.generated_images, s.encode_calls, s.cache_entries
            );
            Ok(())
        }
        Command::BuildPrototypes { run } => {
            let config = ctx.run_config(&run)?;
            let (_, classes) = build_prototypes(&ctx.layout, &config)?;
            for c in classes {
                println!(
                    "{:<24} sources {:>3}  excluded {:>3}{}",
                    c.class_id,
                    c.source_count,
                    c.excluded.len(),
                    if c.deficit > 0 { format!("  short by {}", c.deficit) } else { String::new() }
                );
            }
            Ok(())
        }
        Command::Classify { run, images } => {
            let config = ctx.run_config(&run)?;
            for p in classify_images(&ctx.layout, &config, &images)? {
                println!("{}\t{}\t{:.6}", p.test_image_id, p.predicted_class, p.score);
            }
            Ok(())
        }
        Command::Eval { run, no_baseline } => {
            let config = ctx.run_config(&run)?;
            let result = run_eval(&ctx.layout, &config, EvalOptions { pair_baseline: !no_baseline })?;
            print!("{}", render_report(&result));
            if let Some(b) = &result.baseline {
                println!(
                    "{}",
                    format_delta_row(&config.dataset_id, &config.backend_id, result.accuracy.overall, &b.label, b.overall)
                );
            }
            println!("run directory: {}", ctx.layout.run_dir(&result.run_id).display());
            Ok(())
        }
        Command::Ablate { mut run, backends } => {
            run.backend.get_or_insert_with(|| backends[0].clone());
            let template = ctx.run_config(&run)?;
            let grid = run_ablation_grid(&ctx.layout, &template, &backends)?;
            print!("{}", grid.render());
            Ok(())
        }
        Command::Errors { dataset, style } => {
            let report = dataset_error_report(&ctx.layout, &dataset, style)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Serve { port, host } => serve(&ctx, &host, port.unwrap_or(ctx.settings.service.port)),
        Command::Flag {
            generation,
            class,
            prompt_no,
            category,
            note,
            reviewer,
            dataset,
            style,
        } => {
            let target = match (generation, class, prompt_no) {
                (Some(generation_id), _, _) => FlagTarget::Generation { generation_id },
                (None, Some(class_id), Some(prompt_no)) => FlagTarget::Prompt { class_id, prompt_no },
                _ => return Err(PipelineError::Invalid("pass --generation, or --class with --prompt-no".into())),
            };
            let submission = FlagSubmission {
                target,
                category,
                note,
                reviewer_id: reviewer,
            };
            let record = review::submit_flag(&ctx.layout, dataset.as_deref(), style, &submission)?;
            println!("{}", record.id);
            Ok(())
        }
        Command::Unflag { flag_id } => review::remove_flag(&ctx.layout, &flag_id),
        Command::EditPrompt {
            class,
            prompt_no,
            text,
            clear,
            dataset,
            style,
        } => {
            let dataset = review::resolve_dataset(&ctx.layout, dataset.as_deref(), style, &class)?;
            let text = if clear { None } else { text };
            let entry = review::set_prompt_replacement(&ctx.layout, &dataset, style, &class, prompt_no, text.as_deref())?;
            println!("{}. {}", entry.no, entry.effective_text());
            Ok(())
        }
        Command::Regenerate {
            generation_id,
            prompt,
            seed,
            no_run,
        } => {
            let queued = review::queue_regeneration(&ctx.layout, &generation_id, prompt.as_deref(), seed)?;
            println!("queued {} (seed {})", queued.job.generation_id, queued.job.seed);
            if no_run {
                return Ok(());
            }
            let generator = ctx.generator()?;
            let mut manifest = GenerationManifest::load(&ctx.layout, queued.style, &queued.dataset_id)?;
            let summary = run_pending(
                &mut manifest,
                &ctx.layout,
                &generator,
                1,
                Some(std::slice::from_ref(&queued.job.generation_id)),
            )?;
            report_failures(&summary.failed)
        }
    }
}

fn gen_prompts(ctx: &Ctx, dataset: &str, style: PromptStyle, n_g: usize) -> Result<()> {
    let manifest = ingest_dataset(&ctx.layout.dataset_dir(dataset), dataset)?;
    let provider = match style {
        PromptStyle::CoarseToFine => Some(HttpChatProvider::from_settings(&ctx.settings.llm)?),
        PromptStyle::Baseline => None,
    };
    let mut session = provider.as_ref().map(|p| PromptSession::new(p, dataset, n_g));
    for class in &manifest.classes {
        let set = match session.as_mut() {
            Some(s) => s.describe(class)?,
            None => baseline_prompt_set(dataset, class, n_g)?,
        };
        store_prompts(&ctx.layout, &set)?;
        match &set.deficiency {
            Some(d) => println!("{}: {} of {} prompts", class.class_id, set.prompts.len(), d.expected),
            None => println!("{}: {} prompts", class.class_id, set.prompts.len()),
        }
    }
    Ok(())
}

fn gen_images(
    ctx: &Ctx,
    dataset: &str,
    style: PromptStyle,
    seed: Option<u64>,
    guidance_scale: Option<f64>,
    steps: Option<u32>,
) -> Result<()> {
    let generator = ctx.generator()?;
    let global_seed = seed.unwrap_or(ctx.settings.global_seed);
    let mut params = GenParams::from(&ctx.settings.t2i);
    if let Some(g) = guidance_scale {
        params.guidance_scale = g;
    }
    if let Some(s) = steps {
        params.num_inference_steps = s;
    }
    let mut manifest = match GenerationManifest::load(&ctx.layout, style, dataset) {
        Ok(m) if m.global_seed == global_seed => m,
        Ok(_) | Err(PipelineError::NotFound(_)) => {
            GenerationManifest::new(dataset, style, &generator.engine_id(), global_seed)
        }
        Err(e) => return Err(e),
    };
    let classes = vizproto_pipeline::promptgen::list_prompt_classes(&ctx.layout, style, dataset)?;
    if classes.is_empty() {
        return Err(PipelineError::NotFound(format!(
            "no stored {style} prompts for `{dataset}`; run gen-prompts first"
        )));
    }
    for class in &classes {
        let set = load_prompts(&ctx.layout, style, dataset, class)?;
        manifest.set_plan(class, plan_jobs(&set, global_seed, &params)?);
    }
    let summary = run_pending(&mut manifest, &ctx.layout, &generator, ctx.workers(), None)?;
    println!("{} generated, {} failed", summary.done.len(), summary.failed.len());
    report_failures(&summary.failed)
}

fn report_failures(failed: &[String]) -> Result<()> {
    for id in failed {
        eprintln!("failed: {id}");
    }
    Ok(())
}

fn serve(ctx: &Ctx, host: &str, port: u16) -> Result<()> {
    let mut state = AppState::new(ctx.layout.clone())
        .with_token(ctx.settings.service.token.clone())
        .with_workers(ctx.workers());
    match ctx.generator() {
        Ok(g) => state = state.with_generator(Arc::new(g) as Arc<dyn ImageGenerator>),
        Err(e) => log::warn!("{e}; regenerations will be queued but not run"),
    }
    let addr = format!("{host}:{port}");
    let io = |e: std::io::Error| PipelineError::Io {
        path: PathBuf::from(&addr),
        source: e,
    };
    let rt = tokio::runtime::Runtime::new().map_err(io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        vizproto_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(io)
}
