use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use fusc_core::clustering::{ClusterError, SoftAssignment};
use fusc_core::data::{load_manifest, DataError};
use fusc_core::evaluate::{evaluate, EvalError};
use fusc_core::pipeline::{generalization_eval, run, PipelineError, RunConfig, Stage, RUN_ROOT_ENV};
use fusc_core::synth::{generate, SynthConfig, SynthError};
use fusc_review::{default_log_path, default_thumbnail_dir, ReviewError, ReviewService};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Parser)]
#[command(name = "fusc", version, about = "Unsupervised clustering of ultrasound view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Inpaint burned-in text and derive pseudo-labels.
    Preprocess(ConfigArg),
    /// Train the self-supervised encoder.
    Pretrain(ConfigArg),
    /// Embed every image with the trained encoder.
    Embed(ConfigArg),
    /// Mine K nearest neighbours of the training embeddings.
    Mine(ConfigArg),
    /// Train the cluster head.
    Cluster(ConfigArg),
    /// Retrain on confidently assigned samples.
    Selflabel(ConfigArg),
    /// K-means baseline.
    Kmeans(ConfigArg),
    /// Score a run, or a standalone assignment against a manifest.
    Evaluate(EvaluateArgs),
    /// Write the cluster manifest consumed by the review service.
    Export(ConfigArg),
    /// Run several stages (all by default); finished stages are skipped.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
    },
    /// Cluster and score an external corpus with a finished run's weights.
    Generalize {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifest of the external corpus.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Serve the review API over a cluster manifest.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Correction log; defaults to `<manifest>.review.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Thumbnail cache directory; defaults to `thumbnails/` beside the manifest.
        #[arg(long)]
        thumbnails: Option<PathBuf>,
    },
    /// Generate the procedural five-view benchmark corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2500)]
        images: usize,
    },
    /// Print a run configuration with every default filled in.
    Config {
        /// Dataset manifest to reference.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        text_sidecar: Option<PathBuf>,
        /// Use the synthetic-benchmark preset with this seed.
        #[arg(long)]
        benchmark_seed: Option<u64>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run configuration; evaluates the run's final assignment.
    #[arg(long, short, conflicts_with_all = ["assignment", "manifest"])]
    config: Option<PathBuf>,
    /// Saved soft assignment (JSON header of the matrix files).
    #[arg(long, requires = "manifest")]
    assignment: Option<PathBuf>,
    /// Manifest holding the labels to score against.
    #[arg(long, requires = "assignment")]
    manifest: Option<PathBuf>,
    /// Also report metrics over anatomical superclasses.
    #[arg(long)]
    merge: bool,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn run_stages(config: &Path, stages: &[Stage]) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let outcome = run(&cfg, stages)?;
    for s in &outcome.skipped {
        println!("{s}: up to date");
    }
    for s in &outcome.executed {
        println!("{s}: done");
    }
    if let Some(report) = outcome.report {
        print!("{}", report.to_table());
    }
    println!("run directory: {}", outcome.run_dir.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), CliError> {
    let report = match (&args.config, &args.assignment, &args.manifest) {
        (Some(config), _, _) => {
            let mut cfg = RunConfig::load(config)?;
            cfg.evaluate.merge |= args.merge;
            run(&cfg, &[Stage::Evaluate])?.report.expect("evaluate stage yields a report")
        }
        (None, Some(assignment), Some(manifest)) => {
            let a = SoftAssignment::load(assignment)?;
            let m = load_manifest(manifest)?;
            evaluate(&a, &m, "all", args.merge)?
        }
        _ => {
            return Err(CliError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "evaluate needs --config, or --assignment with --manifest",
            )))
        }
    };
    if args.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preprocess(c) => run_stages(&c.config, &[Stage::Preprocess]),
        Command::Pretrain(c) => run_stages(&c.config, &[Stage::Pretrain]),
        Command::Embed(c) => run_stages(&c.config, &[Stage::Embed]),
        Command::Mine(c) => run_stages(&c.config, &[Stage::Mine]),
        Command::Cluster(c) => run_stages(&c.config, &[Stage::Cluster]),
        Command::Selflabel(c) => run_stages(&c.config, &[Stage::Selflabel]),
        Command::Kmeans(c) => run_stages(&c.config, &[Stage::Kmeans]),
        Command::Export(c) => run_stages(&c.config, &[Stage::Export]),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Run { config, stages } => {
            let stages = if stages.is_empty() { Stage::ALL.to_vec() } else { stages };
            run_stages(&config.config, &stages)
        }
        Command::Generalize { config, manifest } => {
            let cfg = RunConfig::load(&config.config)?;
            let report = generalization_eval(&cfg, &load_manifest(&manifest)?)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Serve { manifest, port, host, log, thumbnails } => {
            let log = log.unwrap_or_else(|| default_log_path(&manifest));
            let thumbnails = thumbnails.unwrap_or_else(|| default_thumbnail_dir(&manifest));
            let service = Arc::new(ReviewService::open(&manifest, &log, &thumbnails)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(fusc_review::serve(service, SocketAddr::new(host, port)))?;
            Ok(())
        }
        Command::Synth { out, seed, images } => {
            let corpus = generate(&SynthConfig { seed, images, ..Default::default() }, &out)?;
            println!("manifest: {}", corpus.manifest_path.display());
            println!("text boxes: {}", corpus.sidecar_path.display());
            Ok(())
        }
        Command::Config { manifest, text_sidecar, benchmark_seed } => {
            let cfg = match benchmark_seed {
                Some(seed) => {
                    let sidecar = text_sidecar.unwrap_or_else(|| manifest.with_file_name("text_boxes.jsonl"));
                    RunConfig::synthetic_benchmark(&manifest, &sidecar, seed)
                }
                None => {
                    let mut cfg = RunConfig::default();
                    cfg.data.manifest = manifest;
                    cfg.data.text_sidecar = text_sidecar;
                    cfg
                }
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    log::debug!("run root override: {:?}", std::env::var_os(RUN_ROOT_ENV));
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
