//! Analysis instruments: routing-fluctuation metrics across checkpoints,
//! gradient-norm statistics, accumulated interference error, the gradient
//! alignment decomposition, and the random-routing perturbation probe.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::Blob;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{MoeConfig, MoeModel, RouteSource};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{derive_seed, rng_from_seed};
use crate::routing::{route_token, RoutingDecision};

/// Routing state of one checkpoint on a fixed probe batch.
#[derive(Debug, Clone)]
pub struct RoutingSnapshot {
    pub checkpoint_step: usize,
    pub decisions: Vec<RoutingDecision>,
    /// Full per-token score vectors.
    pub scores: Vec<Vec<f64>>,
}

/// Snapshot of a checkpointed model's first-layer routing on a probe batch.
pub fn snapshot_model_routing(
    config: &MoeConfig,
    blobs: &[Blob],
    step: usize,
    probe_tokens: &[u16],
    batch: usize,
) -> Result<RoutingSnapshot> {
    let mut g = Graph::new();
    let model = MoeModel::from_blobs(&mut g, config.clone(), blobs)?;
    g.mark_params_end();
    let scores_id = model.first_layer_router_scores(&mut g, probe_tokens, batch)?;
    let e = config.num_experts;
    let data = g.value(scores_id).data().to_vec();
    snapshot_from_scores(step, &data, e, config.top_k, config.normalizer)
}

/// Snapshot from raw score rows (used for grouter routing too).
pub fn snapshot_from_scores(
    step: usize,
    scores: &[f64],
    num_experts: usize,
    k: usize,
    normalizer: crate::routing::Normalizer,
) -> Result<RoutingSnapshot> {
    let n = scores.len() / num_experts;
    let mut rows = Vec::with_capacity(n);
    let mut decisions = Vec::with_capacity(n);
    for t in 0..n {
        let row = scores[t * num_experts..(t + 1) * num_experts].to_vec();
        decisions.push(route_token(&row, k, normalizer)?);
        rows.push(row);
    }
    Ok(RoutingSnapshot {
        checkpoint_step: step,
        decisions,
        scores: rows,
    })
}

/// Fraction of probe tokens whose selected expert sets are identical.
pub fn exact_match_rate(a: &RoutingSnapshot, b: &RoutingSnapshot) -> Result<f64> {
    if a.decisions.len() != b.decisions.len() {
        return Err(Error::ShapeMismatch {
            op: "exact-match-rate",
            lhs: vec![a.decisions.len()],
            rhs: vec![b.decisions.len()],
        });
    }
    if a.decisions.is_empty() {
        return Err(Error::InvalidValue("snapshot", "empty probe batch".into()));
    }
    let matches = a
        .decisions
        .iter()
        .zip(&b.decisions)
        .filter(|(da, db)| da.experts == db.experts)
        .count();
    Ok(matches as f64 / a.decisions.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Mean per-token cosine similarity between the score vectors.
pub fn score_cosine(a: &RoutingSnapshot, b: &RoutingSnapshot) -> Result<f64> {
    if a.scores.len() != b.scores.len() {
        return Err(Error::ShapeMismatch {
            op: "score-cosine",
            lhs: vec![a.scores.len()],
            rhs: vec![b.scores.len()],
        });
    }
    if a.scores.is_empty() {
        return Err(Error::InvalidValue("snapshot", "empty probe batch".into()));
    }
    let total: f64 = a
        .scores
        .iter()
        .zip(&b.scores)
        .map(|(ra, rb)| cosine(ra, rb))
        .sum();
    Ok(total / a.scores.len() as f64)
}

/// Sliding-window coefficient of variation (population stdev / mean).
/// Position i of the output corresponds to trace index `window - 1 + i`;
/// undefined positions before the window fills are not emitted.
pub fn grad_norm_cv(trace: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || trace.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(trace.len() - window + 1);
    for end in window..=trace.len() {
        let w = &trace[end - window..end];
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
        out.push(if mean == 0.0 { 0.0 } else { var.sqrt() / mean });
    }
    out
}

/// Accumulated interference error: sum over aligned steps of the Euclidean
/// distance between observed and ideal expert gradients.
pub fn e_opt(observed: &[Vec<f64>], ideal: &[Vec<f64>]) -> Result<f64> {
    if observed.len() != ideal.len() {
        return Err(Error::ShapeMismatch {
            op: "e-opt",
            lhs: vec![observed.len()],
            rhs: vec![ideal.len()],
        });
    }
    let mut total = 0.0;
    for (o, i) in observed.iter().zip(ideal) {
        if o.len() != i.len() {
            return Err(Error::ShapeMismatch {
                op: "e-opt",
                lhs: vec![o.len()],
                rhs: vec![i.len()],
            });
        }
        total += o
            .iter()
            .zip(i)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct GradAlignment {
    /// Sum of squared per-token gradient norms.
    pub sum_sq: f64,
    /// Sum of cross dot products g_i . g_j for i != j.
    pub cross_term: f64,
    /// Squared norm of the aggregated gradient.
    pub norm_sq: f64,
    /// Raised when the cross term cancels the sum of squares, i.e. the
    /// aggregated update has vanished despite nonzero token gradients.
    pub stagnation: bool,
}

/// Exact decomposition `|sum g_i|^2 = sum |g_i|^2 + sum_{i!=j} g_i . g_j`,
/// each term computed independently.
pub fn grad_alignment(grads: &[Vec<f64>]) -> Result<GradAlignment> {
    let dim = grads.first().map(|g| g.len()).unwrap_or(0);
    if grads.is_empty() || dim == 0 {
        return Err(Error::InvalidValue("grad_alignment", "no gradients".into()));
    }
    for g in grads {
        if g.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "grad-alignment",
                lhs: vec![dim],
                rhs: vec![g.len()],
            });
        }
    }
    let sum_sq: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let mut cross_term = 0.0;
    for i in 0..grads.len() {
        for j in 0..grads.len() {
            if i != j {
                cross_term += grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let mut agg = vec![0.0; dim];
    for g in grads {
        for (a, &v) in agg.iter_mut().zip(g) {
            *a += v;
        }
    }
    let norm_sq: f64 = agg.iter().map(|v| v * v).sum();
    let stagnation = sum_sq > 0.0 && cross_term <= -sum_sq * (1.0 - 1e-6);
    Ok(GradAlignment {
        sum_sq,
        cross_term,
        norm_sq,
        stagnation,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// Randomize routing every `interval` steps (never fires when larger
    /// than `steps`).
    pub interval: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub perturbed_steps: Vec<usize>,
}

impl ProbeResult {
    /// Mean loss increase of perturbed steps over their predecessors.
    pub fn mean_perturbation_spike(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for &s in &self.perturbed_steps {
            if s > 0 && s < self.loss.len() {
                total += self.loss[s] - self.loss[s - 1];
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Resumes SGD training from a checkpoint at a fixed learning rate,
/// replacing the learned routing with uniform-random decisions (k distinct
/// experts, uniform weights) at every `interval`-th step.
pub fn perturb_probe(
    config: &MoeConfig,
    blobs: &[Blob],
    corpus: &Corpus,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let mut g = Graph::new();
    let model = MoeModel::from_blobs(&mut g, config.clone(), blobs)?;
    g.mark_params_end();
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    let mut batch_rng = rng_from_seed(derive_seed(opts.seed, "probe-batches"));
    let mut perturb_rng = rng_from_seed(derive_seed(opts.seed, "probe-routing"));
    let len = corpus.seq_len - 1;
    let mut loss_trace = Vec::with_capacity(opts.steps);
    let mut norm_trace = Vec::with_capacity(opts.steps);
    let mut perturbed_steps = Vec::new();

    for step in 0..opts.steps {
        let mut tokens = Vec::with_capacity(opts.batch * corpus.seq_len);
        for _ in 0..opts.batch {
            let i = batch_rng.random_range(0..corpus.train_len());
            tokens.extend_from_slice(corpus.train_seq(i));
        }
        let mut inputs = Vec::with_capacity(opts.batch * len);
        let mut targets = Vec::with_capacity(opts.batch * len);
        for b in 0..opts.batch {
            inputs.extend_from_slice(&tokens[b * corpus.seq_len..(b + 1) * corpus.seq_len - 1]);
            targets.extend(
                tokens[b * corpus.seq_len + 1..(b + 1) * corpus.seq_len]
                    .iter()
                    .map(|&t| t as usize),
            );
        }
        let perturb = opts.interval > 0 && opts.interval <= opts.steps && step % opts.interval == 0;
        let external;
        let route = if perturb {
            perturbed_steps.push(step);
            external = random_decisions(
                inputs.len(),
                config.num_experts,
                config.top_k,
                &mut perturb_rng,
            );
            RouteSource::External(&external)
        } else {
            RouteSource::Learned
        };
        let fp = model.forward(&mut g, &inputs, opts.batch, &route)?;
        let ce = g.cross_entropy(fp.logits, &targets)?;
        let loss = g.value(ce).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        g.backward(ce)?;
        norm_trace.push(model.params.grad_norm(&g));
        opt.step(&mut g, &model.params, opts.lr)?;
        g.zero_grads();
        g.reset();
        loss_trace.push(loss);
    }
    Ok(ProbeResult {
        loss: loss_trace,
        grad_norm: norm_trace,
        perturbed_steps,
    })
}

/// Concatenated expert-parameter gradient of a checkpointed model on a fixed
/// probe batch, under either its own learned routing or externally supplied
/// decisions. Parameters without gradient contribute zeros.
pub fn expert_gradient(
    config: &MoeConfig,
    blobs: &[Blob],
    tokens: &[u16],
    targets: &[usize],
    batch: usize,
    external: Option<&[RoutingDecision]>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let model = MoeModel::from_blobs(&mut g, config.clone(), blobs)?;
    g.mark_params_end();
    let route = match external {
        Some(decisions) => RouteSource::External(decisions),
        None => RouteSource::Learned,
    };
    let fp = model.forward(&mut g, tokens, batch, &route)?;
    let ce = g.cross_entropy(fp.logits, targets)?;
    g.backward(ce)?;
    let mut out = Vec::new();
    for (_, id) in model.expert_params.iter() {
        match g.grad(id) {
            Some(grad) => out.extend_from_slice(grad),
            None => out.extend(std::iter::repeat(0.0).take(g.value(id).numel())),
        }
    }
    Ok(out)
}

/// Uniform-random routing: k distinct experts per token with equal weights.
pub fn random_decisions(
    tokens: usize,
    num_experts: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<RoutingDecision> {
    (0..tokens)
        .map(|_| {
            let mut picks: Vec<u16> = Vec::with_capacity(k);
            while picks.len() < k {
                let e = rng.random_range(0..num_experts) as u16;
                if !picks.contains(&e) {
                    picks.push(e);
                }
            }
            picks.sort_unstable();
            RoutingDecision {
                experts: picks,
                weights: vec![1.0 / k as f64; k],
            }
        })
        .collect()
}

/// CSV emission for a per-step metric series.
pub fn write_series_csv(path: &Path, header: &str, series: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for (step, v) in series {
        writeln!(f, "{step},{v}")?;
    }
    f.flush()?;
    Ok(())
}
