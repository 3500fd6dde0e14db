use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use taskgen::api::{router, AppState};
use taskgen::batch::{
    build_report, load_corpus, load_ratings, parse_buckets, parse_catalog, plan_batch, run_batch, sample_ids,
    BatchError, BatchOptions, DEFAULT_CONCEPTS, DEFAULT_CONTEXTS,
};
use taskgen::config::{ProviderSpec, ServiceConfig};
use taskgen::domain::TaskStatus;
use taskgen::gateway::{Gateway, ModelConfigSet};
use taskgen::pipeline::{Pipeline, PipelineConfig};
use taskgen::prompt::TemplateSet;
use taskgen::sandbox::{Sandbox, SandboxConfig, SandboxLimits};
use taskgen::store::{Store, TaskFilter};

#[derive(Parser)]
#[command(name = "taskgen", version, about = "Generate, grade and assess personalized programming tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of tasks with randomly paired contexts and concepts.
    Generate(GenerateArgs),
    /// Render the rubric, iteration and agreement report of a rated corpus.
    Report {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        /// Ratings of a second rater over a sample of the corpus.
        #[arg(long)]
        sample_ratings: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a seeded random sample of task ids, one per line.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Load expert ratings from CSV into a store.
    ImportRatings {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
    },
    /// Export stored tasks as a corpus bundle.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_status)]
        status: Option<TaskStatus>,
        /// Only tasks with this many requested concepts.
        #[arg(long)]
        concepts: Option<usize>,
    },
    /// Prompt template utilities.
    Templates {
        #[command(subcommand)]
        command: TemplateCommand,
    },
}

#[derive(Subcommand)]
enum TemplateCommand {
    /// Write the built-in templates to a directory for editing.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    count: usize,
    /// Tasks with one, two and three concepts, as a:b:c.
    #[arg(long)]
    buckets: String,
    /// Context catalog; the built-in catalog when omitted.
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// Concept catalog; the built-in catalog when omitted.
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// live, scripted:FILE, replay:DIR or record:DIR.
    #[arg(long, default_value = "live")]
    provider: String,
    /// TOML file with per-component model settings.
    #[arg(long)]
    provider_config: Option<PathBuf>,
    #[arg(long)]
    template_dir: Option<PathBuf>,
    #[arg(long, default_value = "python3")]
    interpreter: String,
    #[arg(long, default_value = "English")]
    teaching_language: String,
    /// Parallel generations; scripted providers always run serially.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Failed generations tolerated before exiting with status 3.
    #[arg(long, default_value_t = 0)]
    failure_budget: usize,
}

fn parse_status(s: &str) -> Result<TaskStatus, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| "expected functional, non_functional or generation_failed".to_string())
}

fn usage(e: impl std::fmt::Display) -> BatchError {
    BatchError::Usage(e.to_string())
}

fn read_catalog(path: Option<&Path>, default: &str) -> Result<Vec<String>, BatchError> {
    match path {
        Some(p) => {
            std::fs::read_to_string(p).map(|t| parse_catalog(&t)).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
        None => Ok(parse_catalog(default)),
    }
}

fn generate(args: GenerateArgs) -> Result<(), BatchError> {
    let buckets = parse_buckets(&args.buckets)?;
    let contexts = read_catalog(args.contexts.as_deref(), DEFAULT_CONTEXTS)?;
    let concepts = read_catalog(args.concepts.as_deref(), DEFAULT_CONCEPTS)?;
    let plan = plan_batch(args.count, buckets, &contexts, &concepts, args.seed, &args.teaching_language)?;
    let spec: ProviderSpec = args.provider.parse().map_err(usage)?;
    let templates = match &args.template_dir {
        Some(d) => TemplateSet::load_dir(d).map_err(usage)?,
        None => TemplateSet::defaults(),
    };
    let models = match &args.provider_config {
        Some(p) => ModelConfigSet::load(p).map_err(usage)?,
        None => ModelConfigSet::default(),
    };
    let provider = spec.build().map_err(usage)?;
    // A script is consumed in call order, so scripted runs must be serial to be reproducible.
    let workers = if matches!(spec, ProviderSpec::Scripted(_)) { 1 } else { args.workers.max(1) };
    let sandbox = Sandbox::new(SandboxConfig {
        interpreter: args.interpreter.clone(),
        max_concurrent: workers,
        ..SandboxConfig::default()
    });
    let config = PipelineConfig { models, limits: SandboxLimits::default(), ..PipelineConfig::default() };
    let pipeline =
        Pipeline::new(Arc::new(templates), Arc::new(Gateway::new(provider)), sandbox, config).map_err(usage)?;
    let opts = BatchOptions { workers, failure_budget: args.failure_budget };
    let manifest = run_batch(&pipeline, &plan, &opts, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
    Ok(())
}

fn serve(config: &Path) -> Result<(), BatchError> {
    let cfg = ServiceConfig::load(config).map_err(usage)?;
    let state = AppState {
        pipeline: cfg.pipeline().map_err(usage)?,
        store: Store::open(&cfg.store_root).map_err(|e| BatchError::Infrastructure(e.to_string()))?,
        teaching_language: cfg.teaching_language.clone(),
        limits: cfg.limits.clone(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| BatchError::Infrastructure(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .map_err(|e| BatchError::Infrastructure(format!("binding {}: {e}", cfg.listen)))?;
        tracing::info!(address = %cfg.listen, "listening");
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| BatchError::Infrastructure(e.to_string()))
    })
}

fn run(cli: Cli) -> Result<(), BatchError> {
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Report { corpus, ratings, sample_ratings, out } => {
            let report = build_report(&corpus, &ratings, sample_ratings.as_deref())?;
            match out {
                Some(p) => {
                    std::fs::write(&p, report).map_err(|e| BatchError::Infrastructure(format!("{}: {e}", p.display())))
                }
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
        Command::Sample { corpus, n, seed } => {
            let (_, entries) = load_corpus(&corpus)?;
            let ids: Vec<String> = entries.into_iter().map(|e| e.task.id).collect();
            for id in sample_ids(&ids, n, seed)? {
                println!("{id}");
            }
            Ok(())
        }
        Command::Serve { config } => serve(&config),
        Command::ImportRatings { store, ratings } => {
            let parsed = load_ratings(&ratings)?;
            let store = Store::open(store).map_err(|e| BatchError::Infrastructure(e.to_string()))?;
            for r in &parsed {
                let task = store.get_task(&r.task_id).map_err(usage)?;
                r.validate_against(&task).map_err(|e| usage(format!("task {} by {}: {e}", r.task_id, r.rater_id)))?;
                store.put_expert_rating(r).map_err(|e| BatchError::Infrastructure(e.to_string()))?;
            }
            println!("imported {} rating(s)", parsed.len());
            Ok(())
        }
        Command::Export { store, out, status, concepts } => {
            let store = Store::open(store).map_err(|e| BatchError::Infrastructure(e.to_string()))?;
            let filter = TaskFilter { status, concept_count: concepts, ..TaskFilter::default() };
            let manifest = store.export_corpus(&filter, &out).map_err(|e| BatchError::Infrastructure(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            Ok(())
        }
        Command::Templates { command: TemplateCommand::Export { out } } => TemplateSet::export_defaults(&out)
            .map_err(|e| BatchError::Infrastructure(format!("{}: {e}", out.display()))),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
