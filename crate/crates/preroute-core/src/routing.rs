//! Token-to-expert routing: top-k selection, gating normalizers, load
//! accounting, and the router-side losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Normalization applied to the selected top-k logits to form gating weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Normalizer {
    /// Weights sum to 1 over the selected experts.
    Softmax,
    /// Raw sigmoid per selected logit; not renormalized after selection.
    Sigmoid,
}

impl Normalizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalizer::Softmax),
            "sigmoid" => Ok(Normalizer::Sigmoid),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalizer `{other}` (expected softmax|sigmoid)"
            ))),
        }
    }
}

/// Raw per-token router logits over `E` experts.
#[derive(Debug, Clone)]
pub struct RouterScores {
    pub num_experts: usize,
    /// Row-major `[tokens][E]`.
    pub logits: Vec<f64>,
}

impl RouterScores {
    pub fn new(num_experts: usize, logits: Vec<f64>) -> Result<Self> {
        if num_experts == 0 || logits.len() % num_experts != 0 {
            return Err(Error::ShapeMismatch {
                op: "router-scores",
                lhs: vec![logits.len()],
                rhs: vec![num_experts],
            });
        }
        Ok(Self { num_experts, logits })
    }

    pub fn tokens(&self) -> usize {
        self.logits.len() / self.num_experts
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.logits[t * self.num_experts..(t + 1) * self.num_experts]
    }
}

/// Selected expert indices (ascending) and their gating weights for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub experts: Vec<u16>,
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.experts.len()
    }
}

/// Indices of the k largest entries, ties broken toward the lower index.
/// The result is sorted ascending by index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Gating weights for already-selected logits.
pub fn normalize_gates(selected: &[f64], normalizer: Normalizer) -> Vec<f64> {
    match normalizer {
        Normalizer::Softmax => softmax_slice(selected),
        Normalizer::Sigmoid => selected.iter().map(|&s| sigmoid(s)).collect(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Top-k routing for one token.
pub fn route_token(row: &[f64], k: usize, normalizer: Normalizer) -> Result<RoutingDecision> {
    if k > row.len() {
        return Err(Error::IndexOutOfRange {
            what: "top_k",
            index: k,
            bound: row.len(),
        });
    }
    if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("router logit", format!("{bad}")));
    }
    let picked = top_k_indices(row, k);
    let selected: Vec<f64> = picked.iter().map(|&i| row[i]).collect();
    let weights = normalize_gates(&selected, normalizer);
    Ok(RoutingDecision {
        experts: picked.into_iter().map(|i| i as u16).collect(),
        weights,
    })
}

/// Top-k routing for a batch of tokens.
pub fn route(scores: &RouterScores, k: usize, normalizer: Normalizer) -> Result<Vec<RoutingDecision>> {
    (0..scores.tokens())
        .map(|t| route_token(scores.row(t), k, normalizer))
        .collect()
}

/// Per-expert token counts accumulated over training.
#[derive(Debug, Clone)]
pub struct ExpertLoad {
    pub counts: Vec<u64>,
}

impl ExpertLoad {
    pub fn new(num_experts: usize) -> Self {
        Self {
            counts: vec![0; num_experts],
        }
    }

    pub fn record(&mut self, decision: &RoutingDecision) {
        for &e in &decision.experts {
            self.counts[e as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() as f64 / self.counts.len() as f64
    }
}

/// Global load-balance violation: `(max_i L_i - mean) / mean`.
pub fn maxvio_global(load: &ExpertLoad) -> Result<f64> {
    let mean = load.mean();
    if mean == 0.0 {
        return Err(Error::InvalidValue("expert load", "mean load is zero".into()));
    }
    let max = load.counts.iter().copied().max().unwrap_or(0) as f64;
    Ok((max - mean) / mean)
}

/// Fraction of routed (token, slot) pairs hitting each expert.
pub fn routed_fractions(decisions: &[RoutingDecision], num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_experts];
    let mut total = 0u64;
    for d in decisions {
        for &e in &d.experts {
            counts[e as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![0.0; num_experts];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Load-balancing auxiliary loss `coeff * E * sum_i f_i * p_i` as a graph node.
///
/// `f_i` is the (detached) fraction of routed pairs on expert i; `p_i` is the
/// mean full-softmax router probability, which carries the gradient.
pub fn aux_loss(
    g: &mut Graph,
    scores: TensorId,
    decisions: &[RoutingDecision],
    coeff: f64,
) -> Result<TensorId> {
    let num_experts = g.value(scores).cols();
    if decisions.is_empty() {
        return Err(Error::InvalidValue("aux_loss", "empty batch".into()));
    }
    let f = routed_fractions(decisions, num_experts);
    let probs = g.softmax(scores)?;
    let p_mean = g.mean_rows(probs)?;
    let f_const = g.constant(Tensor::new(vec![num_experts], f)?);
    let fp = g.mul(p_mean, f_const)?;
    let dot = g.sum_all(fp)?;
    g.scale(dot, coeff * num_experts as f64)
}

/// Router z-loss `coeff * mean_t (log sum_j exp s_tj)^2` as a graph node.
pub fn z_loss(g: &mut Graph, scores: TensorId, coeff: f64) -> Result<TensorId> {
    let lse = g.logsumexp_rows(scores)?;
    let sq = g.mul(lse, lse)?;
    let m = g.mean_all(sq)?;
    g.scale(m, coeff)
}

/// Balanced hash-layer table: tokens sorted by frequency descending (ties to
/// the lower token id) are greedily assigned to the least-loaded expert.
pub fn hash_layer_table(token_freqs: &[f64], num_experts: usize) -> Result<Vec<u16>> {
    if num_experts == 0 {
        return Err(Error::InvalidConfig("hash table needs at least one expert".into()));
    }
    if let Some(bad) = token_freqs.iter().find(|f| !f.is_finite() || **f < 0.0) {
        return Err(Error::InvalidValue("token frequency", format!("{bad}")));
    }
    let mut order: Vec<usize> = (0..token_freqs.len()).collect();
    order.sort_by(|&a, &b| {
        token_freqs[b]
            .partial_cmp(&token_freqs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut table = vec![0u16; token_freqs.len()];
    let mut loads = vec![0.0f64; num_experts];
    for tok in order {
        let mut best = 0usize;
        for e in 1..num_experts {
            if loads[e] < loads[best] {
                best = e;
            }
        }
        table[tok] = best as u16;
        loads[best] += token_freqs[tok];
    }
    Ok(table)
}
