//! Expert-parallel dispatch simulator: counts cross-partition token messages
//! for a placement plan against random and round-robin placement baselines,
//! plus a synthetic clustered-trace generator.

use std::path::Path;

use rand::Rng;

use crate::cache::{f32_to_bf16_bits, RouteCache};
use crate::ep::{expert_to_partition, remote_messages, PlacementPlan};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::routing::Normalizer;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CommReport {
    pub partitions: usize,
    pub sequences: u64,
    pub tokens: u64,
    pub payload_bytes_per_message: u64,
    /// Remote messages keyed by the partition each sequence was placed on.
    pub per_partition_remote: Vec<u64>,
    pub total_remote: u64,
    pub total_remote_bytes: u64,
    pub baseline_random_remote: u64,
    pub baseline_round_robin_remote: u64,
    /// 1 - optimized/baseline (1.0 when the baseline itself is zero-remote).
    pub savings_vs_random: f64,
    pub savings_vs_round_robin: f64,
}

impl CommReport {
    pub fn csv_header() -> &'static str {
        "partitions,sequences,tokens,total_remote,baseline_random_remote,baseline_round_robin_remote,savings_vs_random,savings_vs_round_robin"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.partitions,
            self.sequences,
            self.tokens,
            self.total_remote,
            self.baseline_random_remote,
            self.baseline_round_robin_remote,
            self.savings_vs_random,
            self.savings_vs_round_robin
        )
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn savings(optimized: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        if optimized == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - optimized as f64 / baseline as f64
    }
}

/// Simulates token dispatch for the plan and both baselines. One message per
/// remote partition holding a selected expert of the token; deterministic
/// given `baseline_seed`.
pub fn simulate(
    cache: &RouteCache,
    plan: &PlacementPlan,
    payload_bytes_per_message: u64,
    baseline_seed: u64,
) -> Result<CommReport> {
    let n_seqs = cache.sequences();
    if plan.assignment.len() as u64 != n_seqs {
        return Err(Error::ConfigMismatch(format!(
            "plan places {} sequences, cache holds {n_seqs}",
            plan.assignment.len()
        )));
    }
    if plan.num_experts != cache.num_experts as usize {
        return Err(Error::ConfigMismatch(format!(
            "plan has {} experts, cache {}",
            plan.num_experts, cache.num_experts
        )));
    }
    let map = expert_to_partition(&plan.expert_groups, plan.num_experts)?;
    let n_p = plan.partitions;
    let mut rng = rng_from_seed(derive_seed(baseline_seed, "random-placement"));

    let mut per_partition_remote = vec![0u64; n_p];
    let mut total_remote = 0u64;
    let mut baseline_random = 0u64;
    let mut baseline_rr = 0u64;
    for s in 0..n_seqs {
        let decisions = cache.sequence_decisions(s, Normalizer::Softmax)?;
        let placed = plan.assignment[s as usize];
        let opt = remote_messages(&decisions, &map, placed);
        per_partition_remote[placed] += opt;
        total_remote += opt;
        let rand_p = rng.random_range(0..n_p);
        baseline_random += remote_messages(&decisions, &map, rand_p);
        baseline_rr += remote_messages(&decisions, &map, s as usize % n_p);
    }

    Ok(CommReport {
        partitions: n_p,
        sequences: n_seqs,
        tokens: cache.token_count,
        payload_bytes_per_message,
        per_partition_remote,
        total_remote,
        total_remote_bytes: total_remote * payload_bytes_per_message,
        baseline_random_remote: baseline_random,
        baseline_round_robin_remote: baseline_rr,
        savings_vs_random: savings(total_remote, baseline_random),
        savings_vs_round_robin: savings(total_remote, baseline_rr),
    })
}

#[derive(Debug, Clone)]
pub struct SynthTraceSpec {
    pub domains: usize,
    /// Probability that a token routes inside its domain's expert subset.
    pub skew: f64,
    pub sequences: usize,
    pub tokens_per_seq: usize,
    pub num_experts: usize,
    pub k: usize,
    pub seed: u64,
}

/// Synthesizes a routing cache with domain-clustered expert preferences:
/// domain d owns the d-th slice of the expert range, sequences cycle through
/// domains, and each token picks its k experts from the domain subset with
/// probability `skew`, otherwise uniformly. Returns the cache and the
/// per-sequence domain labels.
pub fn synth_trace(spec: &SynthTraceSpec) -> Result<(RouteCache, Vec<u16>)> {
    if spec.domains == 0 || spec.num_experts < spec.domains {
        return Err(Error::InvalidConfig(format!(
            "need at least one expert per domain ({} experts, {} domains)",
            spec.num_experts, spec.domains
        )));
    }
    let subset = spec.num_experts / spec.domains;
    if spec.k > subset {
        return Err(Error::InvalidConfig(format!(
            "k {} exceeds domain subset size {subset}",
            spec.k
        )));
    }
    if !(0.0..=1.0).contains(&spec.skew) {
        return Err(Error::InvalidConfig(format!("skew {} not in [0,1]", spec.skew)));
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, "synth-trace"));
    let mut indices = Vec::with_capacity(spec.sequences * spec.tokens_per_seq * spec.k);
    let mut scores = Vec::with_capacity(indices.capacity());
    let mut domains = Vec::with_capacity(spec.sequences);
    let uniform_logit = f32_to_bf16_bits(1.0);
    for s in 0..spec.sequences {
        let dom = s % spec.domains;
        domains.push(dom as u16);
        let lo = dom * subset;
        for _ in 0..spec.tokens_per_seq {
            let in_domain = rng.random::<f64>() < spec.skew;
            let (range_lo, range_n) = if in_domain {
                (lo, subset)
            } else {
                (0, spec.num_experts)
            };
            let mut picks = Vec::with_capacity(spec.k);
            while picks.len() < spec.k {
                let e = range_lo + rng.random_range(0..range_n);
                if !picks.contains(&e) {
                    picks.push(e);
                }
            }
            picks.sort_unstable();
            for e in picks {
                indices.push(e as u16);
                scores.push(uniform_logit);
            }
        }
    }
    let cache = RouteCache {
        num_experts: spec.num_experts as u32,
        k: spec.k as u8,
        index_width: if spec.num_experts <= 256 { 1 } else { 2 },
        sequence_length: spec.tokens_per_seq as u32,
        token_count: (spec.sequences * spec.tokens_per_seq) as u64,
        indices,
        scores,
    };
    Ok((cache, domains))
}
