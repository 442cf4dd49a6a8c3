//! `preroute`: the end-to-end pipeline driver. Each subcommand runs one
//! stage against a run directory, writing versioned artifacts and manifest
//! lines; `cache` and `plan` also work directly on explicit files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use preroute_core::cache::{build_cache, RouteCache};
use preroute_core::comm::simulate;
use preroute_core::ep::{build_plan, PlacementPlan, PlanOptions};
use preroute_core::error::Result;
use preroute_core::grouter::FrozenGrouter;
use preroute_core::pipeline::{
    stage_cache, stage_corpus, stage_diagnose, stage_distill, stage_fold, stage_plan,
    stage_pretrain_source, stage_report, stage_simulate, stage_train_target, stage_tune,
    ExperimentConfig, Granularity, RunDir,
};
use preroute_core::routing::Normalizer;

#[derive(Parser)]
#[command(name = "preroute", about = "Preemptive MoE routing laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// Run directory holding artifacts and the manifest.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Key-value experiment config overlaying the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: `nano` (seconds-to-minutes) or `desk` (laptop scale).
    #[arg(long, default_value = "nano")]
    preset: String,
    /// Seed override (PREROUTE_SEED takes precedence over the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain corpus (train/valid split).
    Corpus(StageArgs),
    /// Train the source MoE model (aux + z losses).
    PretrainSource(StageArgs),
    /// Distill the source's first-layer routing into the grouter.
    Distill(StageArgs),
    /// Fold the grouter to the target expert count by affinity merging.
    Fold(StageArgs),
    /// Rebalance the frozen grouter's score layer on the target distribution.
    Tune(StageArgs),
    /// Build the pre-dispatch routing cache.
    Cache(CacheArgs),
    /// Cluster cached routing and emit the expert/sample placement plan.
    Plan(PlanArgs),
    /// Simulate dispatch communication volume against baselines.
    Simulate(SimArgs),
    /// Train one target arm: grouter | aux | zl | hash.
    TrainTarget(TrainTargetArgs),
    /// Routing stability, gradient CV, and interference diagnostics.
    Diagnose(StageArgs),
    /// Consolidated JSON/CSV report over everything the run produced.
    Report(StageArgs),
}

#[derive(Args)]
struct CacheArgs {
    /// Grouter checkpoint (direct mode; bypasses the run-dir artifacts).
    #[arg(long)]
    grouter: Option<PathBuf>,
    /// Corpus file (direct mode).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output cache file (direct mode).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experts per token in direct mode.
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Gating normalizer in direct mode: softmax | sigmoid.
    #[arg(long, default_value = "softmax")]
    normalizer: String,
    #[command(flatten)]
    stage: StageArgs,
}

#[derive(Args)]
struct PlanArgs {
    /// Cache file (direct mode).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Expert-parallel partition count.
    #[arg(long)]
    partitions: Option<usize>,
    /// Placement granularity: node | gpu.
    #[arg(long, default_value = "node")]
    granularity: String,
    /// Output plan file (direct mode; defaults next to the cache).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    stage: StageArgs,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bytes per token message.
    #[arg(long)]
    payload_bytes: Option<u64>,
    #[command(flatten)]
    stage: StageArgs,
}

#[derive(Args)]
struct TrainTargetArgs {
    /// Routing arm: grouter | aux | zl | hash.
    #[arg(long)]
    router: String,
    #[command(flatten)]
    stage: StageArgs,
}

fn resolve_config(args: &StageArgs) -> Result<ExperimentConfig> {
    let seed = args.seed.unwrap_or(42);
    let base = match args.preset.as_str() {
        "nano" => ExperimentConfig::nano(seed),
        "desk" => ExperimentConfig::desk(seed),
        other => {
            return Err(preroute_core::Error::InvalidConfig(format!(
                "unknown preset `{other}` (nano|desk)"
            )))
        }
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_kv_text(&text, base)?
        }
        None => base,
    };
    // PREROUTE_SEED wins over both the config file and --seed
    if args.config.is_none() {
        if let Ok(seed) = std::env::var("PREROUTE_SEED") {
            let seed: u64 = seed.parse().map_err(|_| {
                preroute_core::Error::InvalidConfig(format!("bad PREROUTE_SEED `{seed}`"))
            })?;
            cfg.seed = seed;
            cfg.corpus.seed = seed;
            if let Some(tc) = &mut cfg.target_corpus {
                tc.seed = seed;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Corpus(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_corpus(&run, &cfg)?;
            println!("corpus written to {}", run.path("corpus.bin").display());
        }
        Cmd::PretrainSource(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_pretrain_source(&run, &cfg)?;
            println!("source checkpoint written to {}", run.path("source.ckpt").display());
        }
        Cmd::Distill(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_distill(&run, &cfg)?;
            println!("grouter written to {}", run.path("grouter_raw.ckpt").display());
        }
        Cmd::Fold(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_fold(&run, &cfg)?;
            println!("folded grouter written to {}", run.path("grouter_folded.ckpt").display());
        }
        Cmd::Tune(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_tune(&run, &cfg)?;
            println!("tuned grouter written to {}", run.path("grouter.ckpt").display());
        }
        Cmd::Cache(args) => match (&args.grouter, &args.corpus, &args.out) {
            (Some(grouter), Some(corpus), Some(out)) => {
                let normalizer = Normalizer::parse(&args.normalizer)?;
                let fz = FrozenGrouter::load(grouter, args.top_k, normalizer)?;
                let corpus = preroute_core::corpus::load(corpus)?;
                let cache = build_cache(&fz, &corpus)?;
                cache.save(out)?;
                println!(
                    "cache written to {} ({} tokens, {} bytes)",
                    out.display(),
                    cache.token_count,
                    cache.file_size()
                );
            }
            (None, None, None) => {
                let cfg = resolve_config(&args.stage)?;
                let run = RunDir::create(&args.stage.run_dir)?;
                stage_cache(&run, &cfg)?;
                println!("cache written to {}", run.path("route.cache").display());
            }
            _ => {
                return Err(preroute_core::Error::InvalidConfig(
                    "cache needs either all of --grouter/--corpus/--out or none".into(),
                ))
            }
        },
        Cmd::Plan(args) => {
            Granularity::parse(&args.granularity)?;
            match &args.cache {
                Some(cache_path) => {
                    let partitions = args.partitions.ok_or_else(|| {
                        preroute_core::Error::InvalidConfig(
                            "--partitions is required with --cache".into(),
                        )
                    })?;
                    let cache = RouteCache::load(cache_path)?;
                    let seed = args.stage.seed.unwrap_or(42);
                    let plan = build_plan(
                        &cache,
                        &PlanOptions {
                            partitions,
                            init_clusters: 100,
                            seed,
                            entropy_threshold: None,
                        },
                    )?;
                    let out = args
                        .out
                        .clone()
                        .unwrap_or_else(|| cache_path.with_file_name("plan.json"));
                    plan.save(&out)?;
                    println!(
                        "plan written to {} (retained {:.1}% of sequences)",
                        out.display(),
                        plan.retained_fraction * 100.0
                    );
                }
                None => {
                    let mut cfg = resolve_config(&args.stage)?;
                    if let Some(p) = args.partitions {
                        cfg.ep.partitions = p;
                    }
                    cfg.ep.granularity = Granularity::parse(&args.granularity)?;
                    let run = RunDir::create(&args.stage.run_dir)?;
                    stage_plan(&run, &cfg)?;
                    println!("plan written to {}", run.path("plan.json").display());
                }
            }
        }
        Cmd::Simulate(args) => match (&args.cache, &args.plan) {
            (Some(cache_path), Some(plan_path)) => {
                let cache = RouteCache::load(cache_path)?;
                let plan = PlacementPlan::load(plan_path)?;
                let payload = args.payload_bytes.unwrap_or(64);
                let report = simulate(&cache, &plan, payload, args.stage.seed.unwrap_or(42))?;
                if let Some(out) = &args.out {
                    report.save_json(out)?;
                }
                println!("{}", preroute_core::comm::CommReport::csv_header());
                println!("{}", report.csv_row());
            }
            (None, None) => {
                let mut cfg = resolve_config(&args.stage)?;
                if let Some(p) = args.payload_bytes {
                    cfg.ep.payload_bytes = p;
                }
                let run = RunDir::create(&args.stage.run_dir)?;
                stage_simulate(&run, &cfg)?;
                println!("report written to {}", run.path("comm.json").display());
            }
            _ => {
                return Err(preroute_core::Error::InvalidConfig(
                    "simulate needs both --cache and --plan, or neither".into(),
                ))
            }
        },
        Cmd::TrainTarget(args) => {
            let cfg = resolve_config(&args.stage)?;
            let run = RunDir::create(&args.stage.run_dir)?;
            let result = stage_train_target(&run, &cfg, &args.router)?;
            println!(
                "arm {} finished: final valid loss {:.4}",
                args.router, result.final_valid_loss
            );
        }
        Cmd::Diagnose(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_diagnose(&run, &cfg)?;
            println!("diagnostics written to {}", run.path("diagnostics.json").display());
        }
        Cmd::Report(args) => {
            let cfg = resolve_config(&args)?;
            let run = RunDir::create(&args.run_dir)?;
            stage_report(&run, &cfg)?;
            println!("report written to {}", run.path("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
