//! Language-model training loop with per-step metrics, periodic
//! checkpoints, and divergence handling.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::Blob;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{MoeConfig, MoeModel, RouteSource};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::rng::{derive_seed, rng_from_seed};
use crate::routing::{aux_loss, z_loss, ExpertLoad, RoutingDecision};

/// Supplies externally computed routing decisions for a batch.
/// `seq_indices` identify the corpus sequences; `tokens` are the flattened
/// model inputs (`len` per sequence), so implementations may route by token
/// content (live router) or by corpus offset (cache replay).
pub trait RouteProvider {
    fn decisions(
        &self,
        seq_indices: &[usize],
        tokens: &[u16],
        len: usize,
    ) -> Result<Vec<RoutingDecision>>;
}

/// Router operating mode for a training run.
pub enum TrainRouterMode<'a> {
    /// Per-layer learned routers; aux/z coefficients control balance losses.
    Learned,
    /// Frozen external routing shared by all layers; router params get no
    /// gradient and no update.
    Frozen(&'a dyn RouteProvider),
    /// Balanced hash-layer table (token id -> expert, unit weight).
    Hash(Vec<u16>),
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub aux_coeff: f64,
    pub z_coeff: f64,
    /// Also checkpoint every this many steps (0 = initial/final only).
    pub checkpoint_every: usize,
    /// Validation sequences per evaluation (0 = whole valid split).
    pub valid_cap: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 8,
            seed: 0,
            optimizer: OptimizerKind::adamw_default(),
            schedule: Schedule::Constant { lr: 1e-3 },
            aux_coeff: 0.0,
            z_coeff: 0.0,
            checkpoint_every: 0,
            valid_cap: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: usize,
    pub tokens: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub maxvio: f64,
}

#[derive(Debug, Clone)]
pub struct TrainCheckpoint {
    pub step: usize,
    pub blobs: Vec<Blob>,
}

pub struct TrainResult {
    pub config: MoeConfig,
    pub metric_log: Vec<MetricRow>,
    pub checkpoints: Vec<TrainCheckpoint>,
    pub valid_log: Vec<(usize, f64)>,
    pub final_valid_loss: f64,
    pub load: ExpertLoad,
    /// Token-layer routing events recorded into `load` (each counts k picks).
    pub tokens_routed: u64,
    pub router_grad_norms: Vec<f64>,
    /// Set when the run aborted on a non-finite loss; checkpoints retain the
    /// last good parameters.
    pub diverged_at: Option<usize>,
}

/// Trains a model on the corpus train split. Deterministic given the seed.
pub fn train_lm(
    config: &MoeConfig,
    corpus: &Corpus,
    mode: &TrainRouterMode,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    config.validate()?;
    if corpus.train_len() == 0 {
        return Err(Error::InvalidConfig("empty train split".into()));
    }
    if corpus.seq_len > config.seq_len + 1 {
        return Err(Error::ConfigMismatch(format!(
            "corpus seq_len {} exceeds model seq_len {} + 1",
            corpus.seq_len, config.seq_len
        )));
    }
    let mut g = Graph::new();
    let mut init_rng = rng_from_seed(derive_seed(opts.seed, "model-init"));
    let model = MoeModel::init(&mut g, config.clone(), &mut init_rng)?;
    g.mark_params_end();
    train_prepared(g, model, corpus, mode, opts)
}

/// Same loop, but starting from an existing model already resident in `g`
/// (used for fine-tuning runs and probes on loaded checkpoints).
pub fn train_prepared(
    mut g: Graph,
    model: MoeModel,
    corpus: &Corpus,
    mode: &TrainRouterMode,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    let len = corpus.seq_len - 1;
    let mut opt = Optimizer::new(opts.optimizer);
    let mut batch_rng = rng_from_seed(derive_seed(opts.seed, "batches"));
    let mut load = ExpertLoad::new(model.config.num_experts);
    let mut tokens_routed = 0u64;
    let mut metric_log = Vec::new();
    let mut router_grad_norms = Vec::new();
    let mut checkpoints = vec![TrainCheckpoint {
        step: 0,
        blobs: model.to_blobs(&g),
    }];
    let mut valid_log = Vec::new();
    let mut tokens_seen = 0u64;
    let mut diverged_at = None;

    for step in 0..opts.steps {
        let (seq_indices, tokens) = sample_batch(corpus, opts.batch, &mut batch_rng);
        let inputs = batch_inputs(&tokens, opts.batch, corpus.seq_len);
        let targets = batch_targets(&tokens, opts.batch, corpus.seq_len);

        let external;
        let route = match mode {
            TrainRouterMode::Learned => RouteSource::Learned,
            TrainRouterMode::Frozen(provider) => {
                external = provider.decisions(&seq_indices, &inputs, len)?;
                RouteSource::External(&external)
            }
            TrainRouterMode::Hash(table) => RouteSource::Hash(table),
        };

        // a numerically invalid forward (non-finite logits) is divergence,
        // not a caller error: abort retaining the last good checkpoint
        let fp = match model.forward(&mut g, &inputs, opts.batch, &route) {
            Ok(fp) => fp,
            Err(Error::InvalidValue(..)) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let ce = g.cross_entropy(fp.logits, &targets)?;
        let mut total = ce;
        if let TrainRouterMode::Learned = mode {
            if opts.aux_coeff > 0.0 {
                let mut parts = Vec::new();
                for (scores, decisions) in fp.layer_scores.iter().zip(&fp.layer_decisions) {
                    let s = scores.expect("learned mode has scores");
                    parts.push(aux_loss(&mut g, s, decisions, opts.aux_coeff)?);
                }
                let sum = g.add_n(&parts)?;
                let mean = g.scale(sum, 1.0 / parts.len() as f64)?;
                total = g.add(total, mean)?;
            }
            if opts.z_coeff > 0.0 {
                let mut parts = Vec::new();
                for scores in fp.layer_scores.iter() {
                    let s = scores.expect("learned mode has scores");
                    parts.push(z_loss(&mut g, s, opts.z_coeff)?);
                }
                let sum = g.add_n(&parts)?;
                let mean = g.scale(sum, 1.0 / parts.len() as f64)?;
                total = g.add(total, mean)?;
            }
        }

        let loss = g.value(total).data()[0];
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }

        g.backward(total)?;
        let grad_norm = model.params.grad_norm(&g);
        router_grad_norms.push(model.router_params.grad_norm(&g));
        let lr = opts.schedule.lr(step);
        match opt.step(&mut g, &model.params, lr) {
            Ok(()) => {}
            Err(Error::NanGradient(_)) => {
                router_grad_norms.pop();
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        g.zero_grads();
        g.reset();

        for decisions in &fp.layer_decisions {
            for d in decisions {
                load.record(d);
                tokens_routed += 1;
            }
        }
        tokens_seen += inputs.len() as u64;
        let maxvio = crate::routing::maxvio_global(&load)?;
        metric_log.push(MetricRow {
            step: step + 1,
            tokens: tokens_seen,
            loss,
            grad_norm,
            maxvio,
        });

        let at_checkpoint =
            opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0;
        if at_checkpoint && step + 1 != opts.steps {
            checkpoints.push(TrainCheckpoint {
                step: step + 1,
                blobs: model.to_blobs(&g),
            });
            let vl = evaluate(&mut g, &model, corpus, mode, opts.valid_cap)?;
            valid_log.push((step + 1, vl));
        }
    }

    if opts.steps > 0 && diverged_at.is_none() {
        checkpoints.push(TrainCheckpoint {
            step: opts.steps,
            blobs: model.to_blobs(&g),
        });
    }
    let final_valid_loss = if corpus.valid_len() > 0 {
        let vl = evaluate(&mut g, &model, corpus, mode, opts.valid_cap)?;
        valid_log.push((metric_log.len(), vl));
        vl
    } else {
        f64::NAN
    };

    Ok(TrainResult {
        config: model.config.clone(),
        metric_log,
        checkpoints,
        valid_log,
        final_valid_loss,
        load,
        tokens_routed,
        router_grad_norms,
        diverged_at,
    })
}

/// Mean validation cross-entropy over (up to `cap`) validation sequences.
pub fn evaluate(
    g: &mut Graph,
    model: &MoeModel,
    corpus: &Corpus,
    mode: &TrainRouterMode,
    cap: usize,
) -> Result<f64> {
    let n = if cap == 0 {
        corpus.valid_len()
    } else {
        corpus.valid_len().min(cap)
    };
    if n == 0 {
        return Err(Error::InvalidConfig("empty valid split".into()));
    }
    let len = corpus.seq_len - 1;
    let mut total = 0.0;
    // evaluate one sequence at a time so caches and live routing agree on offsets
    for i in 0..n {
        let seq = corpus.valid_seq(i).to_vec();
        let inputs = seq[..len].to_vec();
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let external;
        let route = match mode {
            TrainRouterMode::Learned => RouteSource::Learned,
            TrainRouterMode::Frozen(provider) => {
                // validation sequences are addressed after the train split
                let global = corpus.train_len() + i;
                external = provider.decisions(&[global], &inputs, len)?;
                RouteSource::External(&external)
            }
            TrainRouterMode::Hash(table) => RouteSource::Hash(table),
        };
        let fp = model.forward(g, &inputs, 1, &route)?;
        let ce = g.cross_entropy(fp.logits, &targets)?;
        total += g.value(ce).data()[0];
        g.reset();
    }
    Ok(total / n as f64)
}

fn sample_batch(
    corpus: &Corpus,
    batch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<usize>, Vec<u16>) {
    use rand::Rng;
    let mut seqs = Vec::with_capacity(batch);
    let mut tokens = Vec::with_capacity(batch * corpus.seq_len);
    for _ in 0..batch {
        let i = rng.random_range(0..corpus.train_len());
        seqs.push(i);
        tokens.extend_from_slice(corpus.train_seq(i));
    }
    (seqs, tokens)
}

fn batch_inputs(tokens: &[u16], batch: usize, seq_len: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(batch * (seq_len - 1));
    for b in 0..batch {
        out.extend_from_slice(&tokens[b * seq_len..(b + 1) * seq_len - 1]);
    }
    out
}

fn batch_targets(tokens: &[u16], batch: usize, seq_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch * (seq_len - 1));
    for b in 0..batch {
        out.extend(
            tokens[b * seq_len + 1..(b + 1) * seq_len]
                .iter()
                .map(|&t| t as usize),
        );
    }
    out
}

/// Writes the metric log as `step,tokens,loss,grad_norm,maxvio` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,tokens,loss,grad_norm,maxvio")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.step, r.tokens, r.loss, r.grad_norm, r.maxvio)?;
    }
    f.flush()?;
    Ok(())
}

pub fn metrics_csv_string(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,tokens,loss,grad_norm,maxvio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.tokens, r.loss, r.grad_norm, r.maxvio
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;

    fn tiny_config() -> MoeConfig {
        MoeConfig {
            vocab_size: 64,
            hidden: 16,
            num_layers: 1,
            num_heads: 2,
            num_experts: 4,
            top_k: 2,
            expert_hidden: 24,
            seq_len: 16,
            normalizer: crate::routing::Normalizer::Softmax,
        }
    }

    fn tiny_corpus() -> Corpus {
        crate::corpus::generate(&CorpusSpec {
            vocab_size: 64,
            domains: 2,
            seq_len: 17,
            train_sequences: 32,
            valid_sequences: 8,
            skew: 1.0,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_yields_initial_checkpoint_and_empty_log() {
        let corpus = tiny_corpus();
        let opts = TrainOptions {
            steps: 0,
            ..TrainOptions::default()
        };
        let r = train_lm(&tiny_config(), &corpus, &TrainRouterMode::Learned, &opts).unwrap();
        assert!(r.metric_log.is_empty());
        assert_eq!(r.checkpoints.len(), 1);
        assert_eq!(r.checkpoints[0].step, 0);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_logs() {
        let corpus = tiny_corpus();
        let opts = TrainOptions {
            steps: 10,
            batch: 4,
            seed: 42,
            ..TrainOptions::default()
        };
        let a = train_lm(&tiny_config(), &corpus, &TrainRouterMode::Learned, &opts).unwrap();
        let b = train_lm(&tiny_config(), &corpus, &TrainRouterMode::Learned, &opts).unwrap();
        assert_eq!(metrics_csv_string(&a.metric_log), metrics_csv_string(&b.metric_log));
        assert_eq!(a.final_valid_loss, b.final_valid_loss);
    }

    #[test]
    fn load_accounting_is_exact() {
        let corpus = tiny_corpus();
        let opts = TrainOptions {
            steps: 5,
            batch: 3,
            seed: 1,
            ..TrainOptions::default()
        };
        let cfg = tiny_config();
        let r = train_lm(&cfg, &corpus, &TrainRouterMode::Learned, &opts).unwrap();
        // token-layer pairs * k selections each
        let expected = 5 * 3 * (corpus.seq_len as u64 - 1) * cfg.num_layers as u64;
        assert_eq!(r.tokens_routed, expected);
        assert_eq!(r.load.total(), expected * cfg.top_k as u64);
    }

    #[test]
    fn divergence_aborts_and_retains_last_good_checkpoint() {
        let corpus = tiny_corpus();
        // absurd learning rate forces non-finite loss quickly
        let opts = TrainOptions {
            steps: 200,
            batch: 4,
            seed: 2,
            optimizer: OptimizerKind::Sgd,
            schedule: Schedule::Constant { lr: 1e6 },
            ..TrainOptions::default()
        };
        let r = train_lm(&tiny_config(), &corpus, &TrainRouterMode::Learned, &opts).unwrap();
        let step = r.diverged_at.expect("run must diverge at lr 1e6");
        assert!(step < 200);
        // the retained checkpoints all predate the divergence and are finite
        assert!(!r.checkpoints.is_empty());
        for ck in &r.checkpoints {
            assert!(ck.step <= step);
            for (_, _, data) in &ck.blobs {
                assert!(data.iter().all(|v| v.is_finite()));
            }
        }
        assert_eq!(r.metric_log.len(), step);
    }

    #[test]
    fn hash_mode_uses_single_expert_per_token() {
        let corpus = tiny_corpus();
        let table = crate::routing::hash_layer_table(&vec![1.0; 64], 4).unwrap();
        let opts = TrainOptions {
            steps: 3,
            batch: 2,
            seed: 7,
            ..TrainOptions::default()
        };
        let r = train_lm(&tiny_config(), &corpus, &TrainRouterMode::Hash(table), &opts).unwrap();
        // k_eff = 1 in hash mode
        assert_eq!(r.load.total(), r.tokens_routed);
        assert!(r.router_grad_norms.iter().all(|&n| n == 0.0));
    }
}
