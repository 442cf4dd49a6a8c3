//! End-to-end experiment pipeline: a run directory with provenance-hashed
//! artifacts and manifest lines, stage functions for every step of the
//! workflow, and the consolidated report.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cache::{build_cache, CacheProvider, RouteCache};
use crate::checkpoint::{
    expect_magic, read_blobs, read_u32, write_blobs, write_magic, write_u32, Blob, FORMAT_VERSION,
};
use crate::corpus::{Corpus, CorpusSpec};
use crate::diagnostics::{
    exact_match_rate, grad_norm_cv, score_cosine, snapshot_from_scores, snapshot_model_routing,
    RoutingSnapshot,
};
use crate::ep::{build_plan, PlacementPlan, PlanOptions};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grouter::{
    distill, expert_tune, measure_maxvio, DistillOptions, FrozenGrouter, Grouter, GrouterConfig,
    TuneOptions,
};
use crate::model::{MoeConfig, MoeModel};
use crate::optim::{OptimizerKind, Schedule};
use crate::rng::{derive_seed, fnv1a64};
use crate::routing::Normalizer;
use crate::train::{train_lm, write_metrics_csv, TrainOptions, TrainResult, TrainRouterMode};

const MODEL_MAGIC: &[u8] = b"MOEC";

/// Saves a model checkpoint in the MOEC container.
pub fn save_model(path: &Path, config: &MoeConfig, blobs: &[Blob]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_magic(&mut w, MODEL_MAGIC, FORMAT_VERSION)?;
    write_u32(&mut w, config.vocab_size as u32)?;
    write_u32(&mut w, config.hidden as u32)?;
    write_u32(&mut w, config.num_layers as u32)?;
    write_u32(&mut w, config.num_heads as u32)?;
    write_u32(&mut w, config.num_experts as u32)?;
    write_u32(&mut w, config.top_k as u32)?;
    write_u32(&mut w, config.expert_hidden as u32)?;
    write_u32(&mut w, config.seq_len as u32)?;
    write_u32(&mut w, matches!(config.normalizer, Normalizer::Sigmoid) as u32)?;
    write_blobs(&mut w, blobs)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(MoeConfig, Vec<Blob>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, MODEL_MAGIC, "model checkpoint")?;
    let config = MoeConfig {
        vocab_size: read_u32(&mut r)? as usize,
        hidden: read_u32(&mut r)? as usize,
        num_layers: read_u32(&mut r)? as usize,
        num_heads: read_u32(&mut r)? as usize,
        num_experts: read_u32(&mut r)? as usize,
        top_k: read_u32(&mut r)? as usize,
        expert_hidden: read_u32(&mut r)? as usize,
        seq_len: read_u32(&mut r)? as usize,
        normalizer: if read_u32(&mut r)? != 0 {
            Normalizer::Sigmoid
        } else {
            Normalizer::Softmax
        },
    };
    let blobs = read_blobs(&mut r, "model checkpoint")?;
    Ok((config, blobs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Granularity {
    Node,
    Gpu,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Granularity::Node),
            "gpu" => Ok(Granularity::Gpu),
            other => Err(Error::InvalidConfig(format!(
                "unknown granularity `{other}` (expected node|gpu)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Node => "node",
            Granularity::Gpu => "gpu",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpSpec {
    pub partitions: usize,
    pub granularity: Granularity,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Budgets {
    pub source_tokens: u64,
    pub distill_tokens: u64,
    pub tune_tokens: u64,
    pub target_tokens: u64,
}

/// Full experiment description; every stage reads what it needs from here.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub batch: usize,
    pub source: MoeConfig,
    pub grouter: GrouterConfig,
    pub target: MoeConfig,
    pub corpus: CorpusSpec,
    /// Target-side data distribution for tuning; reuses `corpus` when None.
    pub target_corpus: Option<CorpusSpec>,
    pub budgets: Budgets,
    /// Baseline arms compared against the grouter arm.
    pub baseline: String,
    pub ep: EpSpec,
    /// Checkpoint every N target steps (for diagnostics).
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    /// Minutes-scale configuration used by the verification suite; the
    /// values mirror the calibrated comparative setup.
    pub fn nano(seed: u64) -> Self {
        let model = MoeConfig {
            vocab_size: 128,
            hidden: 32,
            num_layers: 2,
            num_heads: 4,
            num_experts: 16,
            top_k: 2,
            expert_hidden: 32,
            seq_len: 32,
            normalizer: Normalizer::Softmax,
        };
        Self {
            seed,
            batch: 16,
            source: model.clone(),
            grouter: GrouterConfig {
                vocab_size: 128,
                embed_dim: 48,
                num_blocks: 2,
                num_heads: 4,
                num_experts_out: 16,
                use_positions: true,
                max_seq_len: 32,
            },
            target: model,
            corpus: CorpusSpec {
                vocab_size: 128,
                domains: 8,
                seq_len: 33,
                train_sequences: 12000,
                valid_sequences: 48,
                skew: 1.0,
                seed,
            },
            target_corpus: None,
            budgets: Budgets {
                source_tokens: 1200 * 8 * 32,
                distill_tokens: 3000 * 8 * 32,
                tune_tokens: 400 * 8 * 32,
                target_tokens: 600 * 16 * 32,
            },
            baseline: "aux".into(),
            ep: EpSpec {
                partitions: 4,
                granularity: Granularity::Node,
                payload_bytes: 64,
            },
            checkpoint_every: 150,
        }
    }

    /// The default laptop-scale configuration (tens of minutes per arm).
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self::nano(seed);
        cfg.source = MoeConfig {
            vocab_size: 512,
            hidden: 64,
            num_layers: 2,
            num_heads: 4,
            num_experts: 16,
            top_k: 2,
            expert_hidden: 64,
            seq_len: 64,
            normalizer: Normalizer::Softmax,
        };
        cfg.target = cfg.source.clone();
        cfg.grouter = GrouterConfig {
            vocab_size: 512,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            num_experts_out: 16,
            use_positions: true,
            max_seq_len: 64,
        };
        cfg.corpus = CorpusSpec {
            vocab_size: 512,
            domains: 8,
            seq_len: 65,
            train_sequences: 60000,
            valid_sequences: 128,
            skew: 1.0,
            seed,
        };
        cfg.budgets = Budgets {
            source_tokens: 5_000_000,
            distill_tokens: 2_000_000,
            tune_tokens: 200_000,
            target_tokens: 10_000_000,
        };
        cfg
    }

    pub fn tokens_per_step(&self, seq_len: usize) -> u64 {
        (self.batch * (seq_len - 1)) as u64
    }

    fn steps_for(&self, tokens: u64, seq_len: usize) -> usize {
        (tokens / self.tokens_per_step(seq_len)).max(1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.grouter.validate()?;
        self.corpus.validate()?;
        if let Some(tc) = &self.target_corpus {
            tc.validate()?;
        }
        if self.budgets.source_tokens == 0
            || self.budgets.distill_tokens == 0
            || self.budgets.target_tokens == 0
        {
            return Err(Error::InvalidConfig("token budgets must be positive".into()));
        }
        if self.grouter.num_experts_out != self.source.num_experts {
            return Err(Error::ConfigMismatch(format!(
                "grouter outputs {} experts, source has {}",
                self.grouter.num_experts_out, self.source.num_experts
            )));
        }
        if self.target.num_experts > self.source.num_experts {
            return Err(Error::ConfigMismatch(format!(
                "cannot fold {} source experts up to {} target experts",
                self.source.num_experts, self.target.num_experts
            )));
        }
        Ok(())
    }

    /// Structured key-value text serialization (`a.b = v` lines).
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("batch", self.batch.to_string());
        push("baseline", self.baseline.clone());
        push("checkpoint_every", self.checkpoint_every.to_string());
        for (prefix, m) in [("source", &self.source), ("target", &self.target)] {
            push(&format!("{prefix}.vocab_size"), m.vocab_size.to_string());
            push(&format!("{prefix}.hidden"), m.hidden.to_string());
            push(&format!("{prefix}.num_layers"), m.num_layers.to_string());
            push(&format!("{prefix}.num_heads"), m.num_heads.to_string());
            push(&format!("{prefix}.num_experts"), m.num_experts.to_string());
            push(&format!("{prefix}.top_k"), m.top_k.to_string());
            push(&format!("{prefix}.expert_hidden"), m.expert_hidden.to_string());
            push(&format!("{prefix}.seq_len"), m.seq_len.to_string());
            push(
                &format!("{prefix}.normalizer"),
                m.normalizer.as_str().to_string(),
            );
        }
        push("grouter.embed_dim", self.grouter.embed_dim.to_string());
        push("grouter.num_blocks", self.grouter.num_blocks.to_string());
        push("grouter.num_heads", self.grouter.num_heads.to_string());
        push("grouter.use_positions", self.grouter.use_positions.to_string());
        push("corpus.vocab_size", self.corpus.vocab_size.to_string());
        push("corpus.domains", self.corpus.domains.to_string());
        push("corpus.seq_len", self.corpus.seq_len.to_string());
        push("corpus.train_sequences", self.corpus.train_sequences.to_string());
        push("corpus.valid_sequences", self.corpus.valid_sequences.to_string());
        push("corpus.skew", self.corpus.skew.to_string());
        if let Some(tc) = &self.target_corpus {
            push("target_corpus.skew", tc.skew.to_string());
            push("target_corpus.train_sequences", tc.train_sequences.to_string());
            push("target_corpus.valid_sequences", tc.valid_sequences.to_string());
        }
        push("budgets.source_tokens", self.budgets.source_tokens.to_string());
        push("budgets.distill_tokens", self.budgets.distill_tokens.to_string());
        push("budgets.tune_tokens", self.budgets.tune_tokens.to_string());
        push("budgets.target_tokens", self.budgets.target_tokens.to_string());
        push("ep.partitions", self.ep.partitions.to_string());
        push("ep.granularity", self.ep.granularity.as_str().to_string());
        push("ep.payload_bytes", self.ep.payload_bytes.to_string());
        s
    }

    /// Parses the key-value text format over a base preset; unknown keys are
    /// rejected, missing keys keep the preset value. `PREROUTE_SEED`
    /// overrides the seed when set.
    pub fn from_kv_text(text: &str, mut base: Self) -> Result<Self> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "experiment config",
                detail: format!("line {}: missing `=` in `{line}`", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Format {
                    what: "experiment config",
                    detail: format!("bad integer `{v}` for {key}"),
                })
            };
            let parse_u64 = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| Error::Format {
                    what: "experiment config",
                    detail: format!("bad integer `{v}` for {key}"),
                })
            };
            match key {
                "seed" => {
                    base.seed = parse_u64(value)?;
                    base.corpus.seed = base.seed;
                    if let Some(tc) = &mut base.target_corpus {
                        tc.seed = base.seed;
                    }
                }
                "batch" => base.batch = parse_usize(value)?,
                "baseline" => base.baseline = value.to_string(),
                "checkpoint_every" => base.checkpoint_every = parse_usize(value)?,
                "source.vocab_size" => base.source.vocab_size = parse_usize(value)?,
                "source.hidden" => base.source.hidden = parse_usize(value)?,
                "source.num_layers" => base.source.num_layers = parse_usize(value)?,
                "source.num_heads" => base.source.num_heads = parse_usize(value)?,
                "source.num_experts" => {
                    base.source.num_experts = parse_usize(value)?;
                    base.grouter.num_experts_out = base.source.num_experts;
                }
                "source.top_k" => base.source.top_k = parse_usize(value)?,
                "source.expert_hidden" => base.source.expert_hidden = parse_usize(value)?,
                "source.seq_len" => base.source.seq_len = parse_usize(value)?,
                "source.normalizer" => base.source.normalizer = Normalizer::parse(value)?,
                "target.vocab_size" => base.target.vocab_size = parse_usize(value)?,
                "target.hidden" => base.target.hidden = parse_usize(value)?,
                "target.num_layers" => base.target.num_layers = parse_usize(value)?,
                "target.num_heads" => base.target.num_heads = parse_usize(value)?,
                "target.num_experts" => base.target.num_experts = parse_usize(value)?,
                "target.top_k" => base.target.top_k = parse_usize(value)?,
                "target.expert_hidden" => base.target.expert_hidden = parse_usize(value)?,
                "target.seq_len" => base.target.seq_len = parse_usize(value)?,
                "target.normalizer" => base.target.normalizer = Normalizer::parse(value)?,
                "grouter.embed_dim" => base.grouter.embed_dim = parse_usize(value)?,
                "grouter.num_blocks" => base.grouter.num_blocks = parse_usize(value)?,
                "grouter.num_heads" => base.grouter.num_heads = parse_usize(value)?,
                "grouter.use_positions" => {
                    base.grouter.use_positions = value.parse().map_err(|_| Error::Format {
                        what: "experiment config",
                        detail: format!("bad bool `{value}`"),
                    })?
                }
                "corpus.vocab_size" => base.corpus.vocab_size = parse_usize(value)?,
                "corpus.domains" => base.corpus.domains = parse_usize(value)?,
                "corpus.seq_len" => base.corpus.seq_len = parse_usize(value)?,
                "corpus.train_sequences" => base.corpus.train_sequences = parse_usize(value)?,
                "corpus.valid_sequences" => base.corpus.valid_sequences = parse_usize(value)?,
                "corpus.skew" => {
                    base.corpus.skew = value.parse().map_err(|_| Error::Format {
                        what: "experiment config",
                        detail: format!("bad float `{value}`"),
                    })?
                }
                "target_corpus.skew" => {
                    let mut tc = base.target_corpus.take().unwrap_or_else(|| base.corpus.clone());
                    tc.skew = value.parse().map_err(|_| Error::Format {
                        what: "experiment config",
                        detail: format!("bad float `{value}`"),
                    })?;
                    base.target_corpus = Some(tc);
                }
                "target_corpus.train_sequences" => {
                    let mut tc = base.target_corpus.take().unwrap_or_else(|| base.corpus.clone());
                    tc.train_sequences = parse_usize(value)?;
                    base.target_corpus = Some(tc);
                }
                "target_corpus.valid_sequences" => {
                    let mut tc = base.target_corpus.take().unwrap_or_else(|| base.corpus.clone());
                    tc.valid_sequences = parse_usize(value)?;
                    base.target_corpus = Some(tc);
                }
                "budgets.source_tokens" => base.budgets.source_tokens = parse_u64(value)?,
                "budgets.distill_tokens" => base.budgets.distill_tokens = parse_u64(value)?,
                "budgets.tune_tokens" => base.budgets.tune_tokens = parse_u64(value)?,
                "budgets.target_tokens" => base.budgets.target_tokens = parse_u64(value)?,
                "ep.partitions" => base.ep.partitions = parse_usize(value)?,
                "ep.granularity" => base.ep.granularity = Granularity::parse(value)?,
                "ep.payload_bytes" => base.ep.payload_bytes = parse_u64(value)?,
                other => {
                    return Err(Error::Format {
                        what: "experiment config",
                        detail: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        if let Ok(seed) = std::env::var("PREROUTE_SEED") {
            let seed: u64 = seed.parse().map_err(|_| Error::Format {
                what: "experiment config",
                detail: format!("bad PREROUTE_SEED `{seed}`"),
            })?;
            base.seed = seed;
            base.corpus.seed = seed;
            if let Some(tc) = &mut base.target_corpus {
                tc.seed = seed;
            }
        }
        Ok(base)
    }
}

/// A run directory: artifacts plus an append-only manifest recording the
/// seed, duration, and input/output fingerprints of every stage.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn file_hash(&self, name: &str) -> Result<u64> {
        let bytes = std::fs::read(self.path(name))?;
        Ok(fnv1a64(&bytes))
    }

    /// Errors with the producing stage's name when an input is missing.
    pub fn require(&self, name: &str, stage: &str, produced_by: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                stage: stage.into(),
                path: p.display().to_string(),
                produced_by: produced_by.into(),
            });
        }
        Ok(p)
    }

    pub fn manifest_append(
        &self,
        stage: &str,
        seed: u64,
        duration_ms: u128,
        inputs: &[(&str, u64)],
        outputs: &[(&str, u64)],
    ) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("manifest.tsv"))?;
        let fmt = |pairs: &[(&str, u64)]| {
            pairs
                .iter()
                .map(|(n, h)| format!("{n}={h:016x}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(
            f,
            "{stage}\t{seed}\t{duration_ms}\t{}\t{}",
            fmt(inputs),
            fmt(outputs)
        )?;
        Ok(())
    }

    /// Latest recorded output hash for an artifact name, scanning the
    /// manifest bottom-up.
    pub fn latest_output_hash(&self, name: &str) -> Result<Option<u64>> {
        let path = self.path("manifest.tsv");
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        let needle = format!("{name}=");
        for line in text.lines().rev() {
            if let Some(outputs) = line.split('\t').nth(4) {
                for pair in outputs.split(';') {
                    if let Some(hash) = pair.strip_prefix(&needle) {
                        let h = u64::from_str_radix(hash, 16).map_err(|_| Error::Format {
                            what: "manifest",
                            detail: format!("bad hash `{hash}`"),
                        })?;
                        return Ok(Some(h));
                    }
                }
            }
        }
        Ok(None)
    }

    /// Verifies that the artifact on disk is the one the manifest last
    /// recorded; guards the report against mixed-provenance inputs.
    pub fn verify_provenance(&self, name: &str) -> Result<()> {
        match self.latest_output_hash(name)? {
            None => Err(Error::Format {
                what: "manifest",
                detail: format!("no provenance recorded for {name}"),
            }),
            Some(recorded) => {
                let actual = self.file_hash(name)?;
                if actual != recorded {
                    Err(Error::Format {
                        what: "manifest",
                        detail: format!(
                            "{name}: on-disk hash {actual:016x} != recorded {recorded:016x} (mixed provenance)"
                        ),
                    })
                } else {
                    Ok(())
                }
            }
        }
    }
}

fn stage_wrap(
    run: &RunDir,
    stage: &str,
    seed: u64,
    inputs: &[&str],
    outputs: &[&str],
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    let start = Instant::now();
    body()?;
    let input_hashes: Vec<(&str, u64)> = inputs
        .iter()
        .map(|n| Ok((*n, run.file_hash(n)?)))
        .collect::<Result<_>>()?;
    let output_hashes: Vec<(&str, u64)> = outputs
        .iter()
        .map(|n| Ok((*n, run.file_hash(n)?)))
        .collect::<Result<_>>()?;
    run.manifest_append(
        stage,
        seed,
        start.elapsed().as_millis(),
        &input_hashes,
        &output_hashes,
    )
}

/// Generates and persists the corpora plus the resolved config.
pub fn stage_corpus(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    stage_wrap(run, "corpus", cfg.seed, &[], &["corpus.bin"], || {
        std::fs::write(run.path("config.resolved.txt"), cfg.to_kv_text())?;
        let corpus = crate::corpus::generate(&cfg.corpus)?;
        crate::corpus::save(&corpus, &run.path("corpus.bin"))
    })?;
    if let Some(tc) = &cfg.target_corpus {
        stage_wrap(run, "corpus-target", cfg.seed, &[], &["target_corpus.bin"], || {
            let corpus = crate::corpus::generate(tc)?;
            crate::corpus::save(&corpus, &run.path("target_corpus.bin"))
        })?;
    }
    Ok(())
}

fn load_corpus(run: &RunDir, stage: &str) -> Result<Corpus> {
    run.require("corpus.bin", stage, "corpus")?;
    crate::corpus::load(&run.path("corpus.bin"))
}

fn load_target_corpus(run: &RunDir, cfg: &ExperimentConfig, stage: &str) -> Result<Corpus> {
    if cfg.target_corpus.is_some() {
        run.require("target_corpus.bin", stage, "corpus")?;
        crate::corpus::load(&run.path("target_corpus.bin"))
    } else {
        load_corpus(run, stage)
    }
}

/// Trains the source model with the aux+z baseline losses.
pub fn stage_pretrain_source(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(run, "pretrain-source")?;
    stage_wrap(
        run,
        "pretrain-source",
        cfg.seed,
        &["corpus.bin"],
        &["source.ckpt", "source_metrics.csv"],
        || {
            let steps = cfg.steps_for(cfg.budgets.source_tokens, cfg.corpus.seq_len);
            let opts = TrainOptions {
                steps,
                batch: cfg.batch.min(8).max(1),
                seed: derive_seed(cfg.seed, "source"),
                optimizer: OptimizerKind::adamw_default(),
                schedule: Schedule::Constant { lr: 1.5e-3 },
                aux_coeff: 0.01,
                z_coeff: 0.001,
                checkpoint_every: 0,
                valid_cap: 32,
            };
            let result = train_lm(&cfg.source, &corpus, &TrainRouterMode::Learned, &opts)?;
            if let Some(step) = result.diverged_at {
                return Err(Error::Diverged { step });
            }
            save_model(
                &run.path("source.ckpt"),
                &cfg.source,
                &result.checkpoints.last().unwrap().blobs,
            )?;
            write_metrics_csv(&run.path("source_metrics.csv"), &result.metric_log)
        },
    )
}

/// Distills the source's first-layer routing into a fresh grouter.
pub fn stage_distill(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(run, "distill")?;
    run.require("source.ckpt", "distill", "pretrain-source")?;
    stage_wrap(
        run,
        "distill",
        cfg.seed,
        &["corpus.bin", "source.ckpt"],
        &["grouter_raw.ckpt", "distill_log.csv"],
        || {
            let (src_cfg, blobs) = load_model(&run.path("source.ckpt"))?;
            let mut g = Graph::new();
            let source = MoeModel::from_blobs(&mut g, src_cfg, &blobs)?;
            let mut rng = crate::rng::rng_from_seed(derive_seed(cfg.seed, "grouter-init"));
            let grouter = Grouter::init(&mut g, cfg.grouter.clone(), &mut rng)?;
            g.mark_params_end();
            let batch = cfg.batch.min(8).max(1);
            let steps = (cfg.budgets.distill_tokens
                / ((batch * (cfg.corpus.seq_len - 1)) as u64))
                .max(1) as usize;
            let opts = DistillOptions {
                steps,
                batch,
                seed: derive_seed(cfg.seed, "distill"),
                schedule: Schedule::WarmupCosine {
                    base_lr: 3e-3,
                    warmup: (steps / 30).max(1),
                    total: steps,
                    min_lr: 5e-5,
                },
            };
            let result = distill(&mut g, &source, &grouter, &corpus, &opts)?;
            grouter.save(&g, &run.path("grouter_raw.ckpt"))?;
            crate::diagnostics::write_series_csv(
                &run.path("distill_log.csv"),
                "step,kl",
                &result.loss_log,
            )?;
            std::fs::write(
                run.path("distill_summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "final_valid_kl": result.final_valid_kl,
                    "steps": steps,
                }))?,
            )?;
            Ok(())
        },
    )
}

/// Folds the grouter from source expert count to target expert count via
/// affinity-based merging (identity mapping when the counts agree).
pub fn stage_fold(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(run, "fold")?;
    run.require("grouter_raw.ckpt", "fold", "distill")?;
    stage_wrap(
        run,
        "fold",
        cfg.seed,
        &["corpus.bin", "grouter_raw.ckpt"],
        &["grouter_folded.ckpt", "mapping.tsv"],
        || {
            let mut g = Graph::new();
            let grouter = Grouter::load(&mut g, &run.path("grouter_raw.ckpt"))?;
            g.mark_params_end();
            let e_s = grouter.config.num_experts_out;
            let e_t = cfg.target.num_experts;
            let mapping = if e_s == e_t {
                crate::folding::MappingMatrix {
                    source_experts: e_s,
                    target_experts: e_t,
                    assignment: (0..e_s).collect(),
                }
            } else {
                // co-activation over a corpus sample under the source top_k
                let sample = corpus.train_len().min(512);
                let len = corpus.seq_len - 1;
                let mut decisions = Vec::new();
                for i in 0..sample {
                    let tokens = corpus.train_seq(i)[..len].to_vec();
                    decisions.extend(grouter.route_tokens(
                        &mut g,
                        &tokens,
                        1,
                        cfg.source.top_k,
                        cfg.source.normalizer,
                    )?);
                    g.reset();
                }
                let (_, _, mapping) = crate::folding::fold_plan(&decisions, e_s, e_t)?;
                mapping
            };
            mapping.save(&run.path("mapping.tsv"))?;
            let folded = grouter.fold(&mut g, &mapping)?;
            folded.save(&g, &run.path("grouter_folded.ckpt"))?;
            Ok(())
        },
    )
}

/// Expert tuning on the target distribution; records pre/post MaxVio.
pub fn stage_tune(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_target_corpus(run, cfg, "tune")?;
    run.require("grouter_folded.ckpt", "tune", "fold")?;
    stage_wrap(
        run,
        "tune",
        cfg.seed,
        &["grouter_folded.ckpt"],
        &["grouter.ckpt", "tune_log.csv", "tune_summary.json"],
        || {
            let mut g = Graph::new();
            let mut grouter = Grouter::load(&mut g, &run.path("grouter_folded.ckpt"))?;
            g.mark_params_end();
            grouter.freeze(&mut g);
            let k = cfg.target.top_k;
            let norm = cfg.target.normalizer;
            let pre = measure_maxvio(&mut g, &grouter, &corpus, 200, k, norm)?;
            let encoder_before = grouter.encoder_checksum(&g);
            let batch = cfg.batch.min(8).max(1);
            let steps = (cfg.budgets.tune_tokens / ((batch * (corpus.seq_len - 1)) as u64))
                .max(1) as usize;
            let opts = TuneOptions {
                steps,
                batch,
                seed: derive_seed(cfg.seed, "tune"),
                lr: 2.0,
                aux_coeff: 0.01,
                top_k: k,
                normalizer: norm,
            };
            let log = expert_tune(&mut g, &grouter, &corpus, &opts)?;
            let post = measure_maxvio(&mut g, &grouter, &corpus, 200, k, norm)?;
            let encoder_after = grouter.encoder_checksum(&g);
            grouter.save(&g, &run.path("grouter.ckpt"))?;
            crate::diagnostics::write_series_csv(&run.path("tune_log.csv"), "step,aux_loss", &log)?;
            std::fs::write(
                run.path("tune_summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "maxvio_pre": pre,
                    "maxvio_post": post,
                    "encoder_unchanged": encoder_before == encoder_after,
                    "steps": steps,
                }))?,
            )?;
            Ok(())
        },
    )
}

/// Builds the pre-dispatch routing cache over the target corpus.
pub fn stage_cache(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_target_corpus(run, cfg, "cache")?;
    run.require("grouter.ckpt", "cache", "tune")?;
    stage_wrap(run, "cache", cfg.seed, &["grouter.ckpt"], &["route.cache"], || {
        let fz = FrozenGrouter::load(
            &run.path("grouter.ckpt"),
            cfg.target.top_k,
            cfg.target.normalizer,
        )?;
        let cache = build_cache(&fz, &corpus)?;
        cache.save(&run.path("route.cache"))
    })
}

/// Clusters cached routing and emits the placement plan.
pub fn stage_plan(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    run.require("route.cache", "plan", "cache")?;
    stage_wrap(run, "plan", cfg.seed, &["route.cache"], &["plan.json"], || {
        let cache = RouteCache::load(&run.path("route.cache"))?;
        let plan = build_plan(
            &cache,
            &PlanOptions {
                partitions: cfg.ep.partitions,
                init_clusters: 100,
                seed: derive_seed(cfg.seed, "plan"),
                entropy_threshold: None,
            },
        )?;
        plan.save(&run.path("plan.json"))
    })
}

/// Simulates dispatch volume for the plan against baselines.
pub fn stage_simulate(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    run.require("route.cache", "simulate", "cache")?;
    run.require("plan.json", "simulate", "plan")?;
    stage_wrap(
        run,
        "simulate",
        cfg.seed,
        &["route.cache", "plan.json"],
        &["comm.json", "comm.csv"],
        || {
            let cache = RouteCache::load(&run.path("route.cache"))?;
            let plan = PlacementPlan::load(&run.path("plan.json"))?;
            let report = crate::comm::simulate(
                &cache,
                &plan,
                cfg.ep.payload_bytes,
                derive_seed(cfg.seed, "sim-baseline"),
            )?;
            report.save_json(&run.path("comm.json"))?;
            std::fs::write(
                run.path("comm.csv"),
                format!("{}\n{}\n", crate::comm::CommReport::csv_header(), report.csv_row()),
            )?;
            Ok(())
        },
    )
}

/// Trains one target arm. `arm` is `grouter` (cache-replayed frozen routing)
/// or a learned baseline: `aux`, `zl`, or `hash`.
pub fn stage_train_target(run: &RunDir, cfg: &ExperimentConfig, arm: &str) -> Result<TrainResult> {
    let corpus = load_target_corpus(run, cfg, "train-target")?;
    let steps = cfg.steps_for(cfg.budgets.target_tokens, corpus.seq_len);
    let mut opts = TrainOptions {
        steps,
        batch: cfg.batch,
        seed: derive_seed(cfg.seed, &format!("target-{arm}")),
        optimizer: OptimizerKind::adamw_default(),
        schedule: Schedule::Constant { lr: 1.5e-3 },
        aux_coeff: 0.0,
        z_coeff: 0.0,
        checkpoint_every: cfg.checkpoint_every,
        valid_cap: 48,
    };
    let cache_provider;
    let hash_table;
    let mode = match arm {
        "grouter" => {
            run.require("route.cache", "train-target", "cache")?;
            let cache = RouteCache::load(&run.path("route.cache"))?;
            if cache.num_experts as usize != cfg.target.num_experts {
                return Err(Error::ConfigMismatch(format!(
                    "cache routes {} experts, target has {}",
                    cache.num_experts, cfg.target.num_experts
                )));
            }
            cache_provider = CacheProvider::new(cache, cfg.target.normalizer);
            TrainRouterMode::Frozen(&cache_provider)
        }
        "aux" => {
            opts.aux_coeff = 0.01;
            TrainRouterMode::Learned
        }
        "zl" => {
            opts.aux_coeff = 0.01;
            opts.z_coeff = 0.001;
            TrainRouterMode::Learned
        }
        "hash" => {
            let hist = corpus.token_histogram();
            hash_table = crate::routing::hash_layer_table(&hist, cfg.target.num_experts)?;
            TrainRouterMode::Hash(hash_table)
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown router arm `{other}` (grouter|aux|zl|hash)"
            )))
        }
    };
    let mut out: Option<TrainResult> = None;
    let inputs: &[&str] = if arm == "grouter" { &["route.cache"] } else { &[] };
    let metrics_name = format!("metrics_{arm}.csv");
    let ckpt_name = format!("target_{arm}.ckpt");
    let valid_name = format!("valid_{arm}.csv");
    let router_name = format!("router_grad_{arm}.csv");
    let outputs = [
        ckpt_name.as_str(),
        metrics_name.as_str(),
        valid_name.as_str(),
        router_name.as_str(),
    ];
    stage_wrap(
        run,
        &format!("train-target-{arm}"),
        cfg.seed,
        inputs,
        &outputs,
        || {
            let result = train_lm(&cfg.target, &corpus, &mode, &opts)?;
            if let Some(step) = result.diverged_at {
                // keep the last good checkpoint on disk, then surface the abort
                save_model(
                    &run.path(&ckpt_name),
                    &cfg.target,
                    &result.checkpoints.last().unwrap().blobs,
                )?;
                return Err(Error::Diverged { step });
            }
            save_model(
                &run.path(&ckpt_name),
                &cfg.target,
                &result.checkpoints.last().unwrap().blobs,
            )?;
            // checkpoint series for diagnostics
            for ck in &result.checkpoints {
                save_model(
                    &run.path(&format!("target_{arm}_step{}.ckpt", ck.step)),
                    &cfg.target,
                    &ck.blobs,
                )?;
            }
            write_metrics_csv(&run.path(&metrics_name), &result.metric_log)?;
            crate::diagnostics::write_series_csv(
                &run.path(&valid_name),
                "step,valid_loss",
                &result.valid_log,
            )?;
            let router_series: Vec<(usize, f64)> = result
                .router_grad_norms
                .iter()
                .enumerate()
                .map(|(i, &n)| (i + 1, n))
                .collect();
            crate::diagnostics::write_series_csv(
                &run.path(&router_name),
                "step,router_grad_norm",
                &router_series,
            )?;
            out = Some(result);
            Ok(())
        },
    )?;
    Ok(out.expect("stage body ran"))
}

/// Checkpoint-pair routing stability, CV curves, and interference error for
/// every arm that was trained.
pub fn stage_diagnose(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_target_corpus(run, cfg, "diagnose")?;
    stage_wrap(run, "diagnose", cfg.seed, &[], &["diagnostics.json"], || {
        // fixed probe batch from the valid split
        let len = corpus.seq_len - 1;
        let probe_seqs = corpus.valid_len().min(8);
        let mut probe_tokens = Vec::with_capacity(probe_seqs * len);
        for i in 0..probe_seqs {
            probe_tokens.extend_from_slice(&corpus.valid_seq(i)[..len]);
        }
        let mut summary = serde_json::Map::new();
        for arm in ["grouter", "aux", "zl", "hash"] {
            let series = checkpoint_series(run, arm)?;
            if series.is_empty() {
                continue;
            }
            let snapshots: Vec<RoutingSnapshot> = match arm {
                "grouter" => {
                    // the frozen routing consumed at every checkpoint comes
                    // from the same grouter; measure it per checkpoint anyway
                    let fz = FrozenGrouter::load(
                        &run.path("grouter.ckpt"),
                        cfg.target.top_k,
                        cfg.target.normalizer,
                    )?;
                    series
                        .iter()
                        .map(|(step, _)| {
                            let scores = fz.scores(&probe_tokens, probe_seqs)?;
                            snapshot_from_scores(
                                *step,
                                &scores,
                                cfg.target.num_experts,
                                cfg.target.top_k,
                                cfg.target.normalizer,
                            )
                        })
                        .collect::<Result<_>>()?
                }
                _ => series
                    .iter()
                    .map(|(step, path)| {
                        let (mcfg, blobs) = load_model(path)?;
                        snapshot_model_routing(&mcfg, &blobs, *step, &probe_tokens, probe_seqs)
                    })
                    .collect::<Result<_>>()?,
            };
            let mut match_series = Vec::new();
            let mut cosine_series = Vec::new();
            for w in snapshots.windows(2) {
                match_series.push((w[1].checkpoint_step, exact_match_rate(&w[0], &w[1])?));
                cosine_series.push((w[1].checkpoint_step, score_cosine(&w[0], &w[1])?));
            }
            crate::diagnostics::write_series_csv(
                &run.path(&format!("match_rate_{arm}.csv")),
                "step,exact_match_rate",
                &match_series,
            )?;
            crate::diagnostics::write_series_csv(
                &run.path(&format!("score_cosine_{arm}.csv")),
                "step,score_cosine",
                &cosine_series,
            )?;
            // grad-norm CV over the metric trace
            let grad_trace = read_metric_column(&run.path(&format!("metrics_{arm}.csv")), 3)?;
            let cv = grad_norm_cv(&grad_trace, 100);
            let cv_series: Vec<(usize, f64)> =
                cv.iter().enumerate().map(|(i, &v)| (i + 100, v)).collect();
            crate::diagnostics::write_series_csv(
                &run.path(&format!("grad_cv_{arm}.csv")),
                "step,grad_norm_cv",
                &cv_series,
            )?;
            let e_opt = arm_e_opt(run, cfg, arm, &series, &probe_tokens, probe_seqs, &corpus)?;
            summary.insert(
                arm.to_string(),
                serde_json::json!({
                    "checkpoints": series.len(),
                    "min_match_rate": match_series.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min),
                    "min_score_cosine": cosine_series.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min),
                    "max_grad_cv": cv.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    "e_opt": e_opt,
                }),
            );
        }
        std::fs::write(
            run.path("diagnostics.json"),
            serde_json::to_string_pretty(&serde_json::Value::Object(summary))?,
        )?;
        Ok(())
    })
}

fn checkpoint_series(run: &RunDir, arm: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let prefix = format!("target_{arm}_step");
    for entry in std::fs::read_dir(run.root())? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(rest) = name.strip_prefix(&prefix) {
            if let Some(step) = rest.strip_suffix(".ckpt") {
                if let Ok(step) = step.parse::<usize>() {
                    out.push((step, entry.path()));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_metric_column(path: &Path, col: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() > col {
            out.push(fields[col].parse::<f64>().map_err(|_| Error::Format {
                what: "metric csv",
                detail: format!("bad float in `{line}`"),
            })?);
        }
    }
    Ok(out)
}

/// Interference error of an arm: sum over checkpoints of the distance
/// between expert gradients under the checkpoint's own routing and under the
/// final (ideal) routing, on the fixed probe batch.
fn arm_e_opt(
    run: &RunDir,
    cfg: &ExperimentConfig,
    arm: &str,
    series: &[(usize, PathBuf)],
    probe_tokens: &[u16],
    probe_batch: usize,
    corpus: &Corpus,
) -> Result<f64> {
    let len = corpus.seq_len - 1;
    // probe targets: the shifted continuation of each probe sequence
    let mut targets = Vec::with_capacity(probe_tokens.len());
    for i in 0..probe_batch {
        let seq = corpus.valid_seq(i);
        targets.extend(seq[1..=len].iter().map(|&t| t as usize));
    }
    let mut observed = Vec::new();
    let mut ideal = Vec::new();
    match arm {
        "grouter" => {
            // frozen routing: the "ideal" router is the frozen router itself
            let cache_decisions = {
                let fz = FrozenGrouter::load(
                    &run.path("grouter.ckpt"),
                    cfg.target.top_k,
                    cfg.target.normalizer,
                )?;
                fz.route(probe_tokens, probe_batch)?
            };
            for (_, path) in series {
                let (mcfg, blobs) = load_model(path)?;
                let g1 = crate::diagnostics::expert_gradient(
                    &mcfg,
                    &blobs,
                    probe_tokens,
                    &targets,
                    probe_batch,
                    Some(&cache_decisions),
                )?;
                let g2 = crate::diagnostics::expert_gradient(
                    &mcfg,
                    &blobs,
                    probe_tokens,
                    &targets,
                    probe_batch,
                    Some(&cache_decisions),
                )?;
                observed.push(g1);
                ideal.push(g2);
            }
        }
        _ => {
            // learned arms: ideal router = final checkpoint's router
            let (_, final_blobs) = load_model(&series.last().unwrap().1)?;
            let router_blobs: Vec<Blob> = final_blobs
                .iter()
                .filter(|(name, _, _)| name.contains(".router"))
                .cloned()
                .collect();
            for (_, path) in series {
                let (mcfg, blobs) = load_model(path)?;
                observed.push(crate::diagnostics::expert_gradient(
                    &mcfg,
                    &blobs,
                    probe_tokens,
                    &targets,
                    probe_batch,
                    None,
                )?);
                // splice the ideal router parameters over the checkpoint
                let mut hybrid = blobs.clone();
                for blob in &mut hybrid {
                    if blob.0.contains(".router") {
                        if let Some(fb) = router_blobs.iter().find(|(n, _, _)| *n == blob.0) {
                            blob.1 = fb.1.clone();
                            blob.2 = fb.2.clone();
                        }
                    }
                }
                ideal.push(crate::diagnostics::expert_gradient(
                    &mcfg,
                    &hybrid,
                    probe_tokens,
                    &targets,
                    probe_batch,
                    None,
                )?);
            }
        }
    }
    crate::diagnostics::e_opt(&observed, &ideal)
}

/// Consolidated report: loss curves, MaxVio-vs-loss scatter with quadrant
/// labels, CV curves, and the communication savings table. Refuses inputs
/// whose on-disk hashes no longer match the manifest.
pub fn stage_report(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    stage_wrap(run, "report", cfg.seed, &[], &["report.json", "report.csv"], || {
        let mut arms = Vec::new();
        for arm in ["grouter", "aux", "zl", "hash"] {
            let metrics = format!("metrics_{arm}.csv");
            if run.path(&metrics).exists() {
                run.verify_provenance(&metrics)?;
                arms.push(arm);
            }
        }
        let mut report = serde_json::Map::new();
        report.insert("version".into(), serde_json::json!(1));
        let mut csv = String::from("metric,arm,value\n");

        // loss-vs-tokens curves and final stats per arm
        let mut finals: Vec<(String, f64, f64)> = Vec::new(); // (arm, valid_loss, maxvio)
        let mut curves = serde_json::Map::new();
        for arm in &arms {
            let metrics_path = run.path(&format!("metrics_{arm}.csv"));
            let tokens = read_metric_column(&metrics_path, 1)?;
            let loss = read_metric_column(&metrics_path, 2)?;
            let maxvio = read_metric_column(&metrics_path, 4)?;
            let valid_path = run.path(&format!("valid_{arm}.csv"));
            let valid_loss = if valid_path.exists() {
                run.verify_provenance(&format!("valid_{arm}.csv"))?;
                read_metric_column(&valid_path, 1)?.last().copied().unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            let final_maxvio = maxvio.last().copied().unwrap_or(f64::NAN);
            finals.push((arm.to_string(), valid_loss, final_maxvio));
            let curve: Vec<serde_json::Value> = tokens
                .iter()
                .zip(&loss)
                .step_by((loss.len() / 64).max(1))
                .map(|(t, l)| serde_json::json!([t, l]))
                .collect();
            curves.insert(arm.to_string(), serde_json::Value::Array(curve));
            csv.push_str(&format!("final_valid_loss,{arm},{valid_loss}\n"));
            csv.push_str(&format!("final_maxvio,{arm},{final_maxvio}\n"));
        }
        report.insert("loss_curves".into(), serde_json::Value::Object(curves));

        // MaxVio-vs-loss scatter with median-based quadrant labels
        let median = |mut v: Vec<f64>| -> f64 {
            v.retain(|x| x.is_finite());
            if v.is_empty() {
                return f64::NAN;
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let med_loss = median(finals.iter().map(|(_, l, _)| *l).collect());
        let med_vio = median(finals.iter().map(|(_, _, v)| *v).collect());
        let scatter: Vec<serde_json::Value> = finals
            .iter()
            .map(|(arm, loss, vio)| {
                let quadrant = match (*loss <= med_loss, *vio <= med_vio) {
                    (true, true) => "low-loss/low-vio",
                    (true, false) => "low-loss/high-vio",
                    (false, true) => "high-loss/low-vio",
                    (false, false) => "high-loss/high-vio",
                };
                serde_json::json!({
                    "arm": arm, "valid_loss": loss, "maxvio": vio, "quadrant": quadrant,
                })
            })
            .collect();
        report.insert("maxvio_scatter".into(), serde_json::Value::Array(scatter));
        report.insert(
            "scatter_medians".into(),
            serde_json::json!({"valid_loss": med_loss, "maxvio": med_vio}),
        );

        // communication savings
        if run.path("comm.json").exists() {
            run.verify_provenance("comm.json")?;
            let comm: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(run.path("comm.json"))?)?;
            if let Some(s) = comm.get("savings_vs_random").and_then(|v| v.as_f64()) {
                csv.push_str(&format!("comm_savings_vs_random,plan,{s}\n"));
            }
            report.insert("comm".into(), comm);
        }
        if run.path("diagnostics.json").exists() {
            run.verify_provenance("diagnostics.json")?;
            let diag: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(run.path("diagnostics.json"))?)?;
            report.insert("diagnostics".into(), diag);
        }

        std::fs::write(
            run.path("report.json"),
            serde_json::to_string_pretty(&serde_json::Value::Object(report))?,
        )?;
        std::fs::write(run.path("report.csv"), csv)?;
        Ok(())
    })
}
