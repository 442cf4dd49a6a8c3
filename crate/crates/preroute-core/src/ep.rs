//! Offline expert-parallel planning: per-sequence routing affinity vectors,
//! entropy filtering, clustering, optimal expert-group assignment, and
//! minimum-communication sample placement.

use std::path::Path;

use crate::cache::RouteCache;
use crate::cluster::{cluster, Clustering};
use crate::error::{Error, Result};
use crate::folding::group_sizes;
use crate::hungarian::{solve_max, total_score};
use crate::routing::RoutingDecision;

/// Per-sequence expert selection frequencies; sums to k.
#[derive(Debug, Clone)]
pub struct AffinityVector {
    pub seq: usize,
    pub phi: Vec<f64>,
    pub tokens: usize,
}

/// Affinity vectors for every sequence in a cache.
pub fn affinity_vectors(cache: &RouteCache) -> Vec<AffinityVector> {
    let e = cache.num_experts as usize;
    let len = cache.sequence_length as usize;
    let k = cache.k as usize;
    let n = cache.sequences() as usize;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut phi = vec![0.0; e];
        let base = s * len * k;
        for t in 0..len {
            for i in 0..k {
                phi[cache.indices[base + t * k + i] as usize] += 1.0;
            }
        }
        for v in &mut phi {
            *v /= len as f64;
        }
        out.push(AffinityVector {
            seq: s,
            phi,
            tokens: len,
        });
    }
    out
}

/// Affinity vector of one decision sequence.
pub fn affinity_vector(decisions: &[RoutingDecision], num_experts: usize, seq: usize) -> AffinityVector {
    let mut phi = vec![0.0; num_experts];
    for d in decisions {
        for &e in &d.experts {
            phi[e as usize] += 1.0;
        }
    }
    for v in &mut phi {
        *v /= decisions.len() as f64;
    }
    AffinityVector {
        seq,
        phi,
        tokens: decisions.len(),
    }
}

/// Shannon entropy in bits of the normalized affinity vector (0 log 0 = 0).
/// Scale-invariant: phi and c*phi give the same value.
pub fn entropy_bits(phi: &[f64]) -> f64 {
    let total: f64 = phi.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &v in phi {
        if v > 0.0 {
            let p = v / total;
            h -= p * p.log2();
        }
    }
    h
}

/// Desk-scale default threshold, preserving the reference margin for E=128
/// (where it equals 6.85) proportionally: log2(E) - 0.15.
pub fn default_entropy_threshold(num_experts: usize) -> f64 {
    (num_experts as f64).log2() - 0.15
}

/// Splits into (retained, discarded sequence ids); a vector is discarded when
/// its entropy exceeds the threshold.
pub fn entropy_filter(
    phis: Vec<AffinityVector>,
    threshold_bits: f64,
) -> (Vec<AffinityVector>, Vec<usize>) {
    let mut retained = Vec::with_capacity(phis.len());
    let mut discarded = Vec::new();
    for av in phis {
        if entropy_bits(&av.phi) > threshold_bits {
            discarded.push(av.seq);
        } else {
            retained.push(av);
        }
    }
    (retained, discarded)
}

/// Assigns experts to partitions by exact maximum bipartite matching on an
/// expert x slot score matrix; slot scores are the mass-weighted centroid
/// affinity of the slot's partition. Capacities differ by at most one, larger
/// partitions first. Returns (groups, total score).
pub fn assign_experts(
    centroids: &[Vec<f64>],
    masses: &[f64],
    num_experts: usize,
) -> Result<(Vec<Vec<usize>>, f64)> {
    let n_p = centroids.len();
    if n_p == 0 || masses.len() != n_p {
        return Err(Error::InvalidConfig("empty clustering".into()));
    }
    if n_p > num_experts {
        return Err(Error::InvalidConfig(format!(
            "more partitions ({n_p}) than experts ({num_experts})"
        )));
    }
    for c in centroids {
        if c.len() != num_experts {
            return Err(Error::ShapeMismatch {
                op: "assign-experts",
                lhs: vec![num_experts],
                rhs: vec![c.len()],
            });
        }
    }
    let caps = group_sizes(num_experts, n_p)?;
    let mut slot_partition = Vec::with_capacity(num_experts);
    for (p, &cap) in caps.iter().enumerate() {
        slot_partition.extend(std::iter::repeat(p).take(cap));
    }
    // score[expert][slot]
    let score: Vec<Vec<f64>> = (0..num_experts)
        .map(|e| {
            slot_partition
                .iter()
                .map(|&p| masses[p] * centroids[p][e])
                .collect()
        })
        .collect();
    let assign = solve_max(&score)?;
    let total = total_score(&score, &assign);
    let mut groups = vec![Vec::new(); n_p];
    for (e, &slot) in assign.iter().enumerate() {
        groups[slot_partition[slot]].push(e);
    }
    for group in &mut groups {
        group.sort_unstable();
    }
    Ok((groups, total))
}

/// `expert -> partition` lookup from groups.
pub fn expert_to_partition(groups: &[Vec<usize>], num_experts: usize) -> Result<Vec<usize>> {
    let mut map = vec![usize::MAX; num_experts];
    for (p, group) in groups.iter().enumerate() {
        for &e in group {
            if e >= num_experts || map[e] != usize::MAX {
                return Err(Error::InvalidValue(
                    "expert groups",
                    format!("expert {e} duplicated or out of range"),
                ));
            }
            map[e] = p;
        }
    }
    if map.iter().any(|&p| p == usize::MAX) {
        return Err(Error::InvalidValue("expert groups", "expert unassigned".into()));
    }
    Ok(map)
}

/// Number of tokens of the sequence with at least one selected expert on
/// partition `p` (the overlap |T_s(p)|).
pub fn overlap_tokens(decisions: &[RoutingDecision], expert_part: &[usize], p: usize) -> usize {
    decisions
        .iter()
        .filter(|d| d.experts.iter().any(|&e| expert_part[e as usize] == p))
        .count()
}

/// Exact per-sequence dispatch cost when placed on `p`: one message per
/// remote partition holding any selected expert, summed over tokens.
pub fn remote_messages(decisions: &[RoutingDecision], expert_part: &[usize], p: usize) -> u64 {
    let n_p = expert_part.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut total = 0u64;
    let mut seen = vec![false; n_p];
    for d in decisions {
        for s in seen.iter_mut() {
            *s = false;
        }
        for &e in &d.experts {
            let part = expert_part[e as usize];
            if part != p && !seen[part] {
                seen[part] = true;
                total += 1;
            }
        }
    }
    total
}

/// Greedy placement: the partition with maximal token overlap (ties to the
/// lowest id), which coincides with the minimum remote-message partition.
pub fn place_sample(decisions: &[RoutingDecision], groups: &[Vec<usize>], num_experts: usize) -> Result<usize> {
    let map = expert_to_partition(groups, num_experts)?;
    let n_p = groups.len();
    let mut best = 0usize;
    let mut best_overlap = 0usize;
    let mut first = true;
    for p in 0..n_p {
        let ov = overlap_tokens(decisions, &map, p);
        if first || ov > best_overlap {
            best = p;
            best_overlap = ov;
            first = false;
        }
    }
    Ok(best)
}

/// The full offline plan: expert groups per partition and a partition for
/// every sequence in the cache.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlacementPlan {
    pub version: u16,
    pub partitions: usize,
    pub num_experts: usize,
    pub expert_groups: Vec<Vec<usize>>,
    /// Partition of each sequence, indexed by cache sequence order.
    pub assignment: Vec<usize>,
    /// Sequences excluded from clustering by the entropy filter (they are
    /// still placed).
    pub discarded: Vec<usize>,
    /// Retention fraction after the entropy filter.
    pub retained_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub partitions: usize,
    pub init_clusters: usize,
    pub seed: u64,
    /// Entropy threshold in bits; None = log2(E) - 0.15.
    pub entropy_threshold: Option<f64>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            partitions: 4,
            init_clusters: 100,
            seed: 0,
            entropy_threshold: None,
        }
    }
}

/// Affinity vectors -> entropy filter -> clustering -> expert matching ->
/// per-sequence placement.
pub fn build_plan(cache: &RouteCache, opts: &PlanOptions) -> Result<PlacementPlan> {
    let e = cache.num_experts as usize;
    let n_p = opts.partitions;
    if n_p == 0 {
        return Err(Error::InvalidConfig("need at least one partition".into()));
    }
    if n_p > e {
        return Err(Error::InvalidConfig(format!(
            "more partitions ({n_p}) than experts ({e})"
        )));
    }
    let phis = affinity_vectors(cache);
    let total = phis.len();
    let threshold = opts
        .entropy_threshold
        .unwrap_or_else(|| default_entropy_threshold(e));
    let (retained, discarded) = entropy_filter(phis, threshold);
    if retained.len() < n_p {
        return Err(Error::InvalidConfig(format!(
            "entropy filter retained {} sequences, need at least {n_p}",
            retained.len()
        )));
    }
    let retained_fraction = retained.len() as f64 / total.max(1) as f64;
    let points: Vec<Vec<f64>> = retained.iter().map(|av| av.phi.clone()).collect();
    let clustering: Clustering = cluster(&points, n_p, opts.init_clusters, opts.seed)?;
    let (expert_groups, _) = assign_experts(&clustering.centroids, &clustering.masses, e)?;

    let map = expert_to_partition(&expert_groups, e)?;
    let mut assignment = Vec::with_capacity(cache.sequences() as usize);
    for s in 0..cache.sequences() {
        // placement needs only the selected indices; the normalizer is
        // irrelevant here
        let decisions = cache.sequence_decisions(s, crate::routing::Normalizer::Softmax)?;
        let mut best = 0usize;
        let mut best_overlap = 0usize;
        let mut first = true;
        for p in 0..n_p {
            let ov = overlap_tokens(&decisions, &map, p);
            if first || ov > best_overlap {
                best = p;
                best_overlap = ov;
                first = false;
            }
        }
        assignment.push(best);
    }

    Ok(PlacementPlan {
        version: 1,
        partitions: n_p,
        num_experts: e,
        expert_groups,
        assignment,
        discarded,
        retained_fraction,
    })
}

impl PlacementPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: PlacementPlan = serde_json::from_str(&text)?;
        if plan.version != 1 {
            return Err(Error::Format {
                what: "placement plan",
                detail: format!("unsupported version {}", plan.version),
            });
        }
        if plan.expert_groups.len() != plan.partitions {
            return Err(Error::Format {
                what: "placement plan",
                detail: "group count != partitions".into(),
            });
        }
        expert_to_partition(&plan.expert_groups, plan.num_experts)?;
        Ok(plan)
    }

    /// Population counts per partition.
    pub fn partition_populations(&self) -> Vec<usize> {
        let mut pops = vec![0usize; self.partitions];
        for &p in &self.assignment {
            pops[p] += 1;
        }
        pops
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RoutingDecision;

    fn decision(experts: Vec<u16>) -> RoutingDecision {
        let k = experts.len();
        RoutingDecision {
            experts,
            weights: vec![1.0 / k as f64; k],
        }
    }

    #[test]
    fn affinity_vector_counts_selection_frequencies() {
        // 2 tokens, k=1: token0 -> e0, token1 -> e1, E=4
        let d = vec![decision(vec![0]), decision(vec![1])];
        let av = affinity_vector(&d, 4, 0);
        assert_eq!(av.phi, vec![0.5, 0.5, 0.0, 0.0]);

        // every token selects {0,1}, k=2
        let d: Vec<RoutingDecision> = (0..5).map(|_| decision(vec![0, 1])).collect();
        let av = affinity_vector(&d, 6, 0);
        assert_eq!(av.phi[..2], [1.0, 1.0]);
        assert!(av.phi[2..].iter().all(|&v| v == 0.0));
        // sums to k
        assert!((av.phi.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_filter_thresholds() {
        // uniform over 128 experts: entropy 7 bits > 6.85 -> discarded
        let uniform = AffinityVector {
            seq: 0,
            phi: vec![1.0 / 64.0; 128],
            tokens: 10,
        };
        assert!((entropy_bits(&uniform.phi) - 7.0).abs() < 1e-12);
        // one-hot: entropy 0 -> retained
        let mut onehot_phi = vec![0.0; 128];
        onehot_phi[3] = 2.0;
        let onehot = AffinityVector {
            seq: 1,
            phi: onehot_phi,
            tokens: 10,
        };
        assert_eq!(entropy_bits(&onehot.phi), 0.0);
        let threshold = default_entropy_threshold(128);
        assert!((threshold - 6.85).abs() < 1e-12);
        let (retained, discarded) = entropy_filter(vec![uniform, onehot], threshold);
        assert_eq!(retained.len(), 1);
        assert_eq!(retained[0].seq, 1);
        assert_eq!(discarded, vec![0]);
    }

    #[test]
    fn entropy_is_scale_invariant() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(4);
        for _ in 0..50 {
            let phi: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<f64> = phi.iter().map(|&v| v * c).collect();
            assert!((entropy_bits(&phi) - entropy_bits(&scaled)).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_clusters_get_their_own_experts() {
        // 2 clusters preferring disjoint expert halves of E=6
        let centroids = vec![
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        ];
        let masses = vec![10.0, 10.0];
        let (groups, _) = assign_experts(&centroids, &masses, 6).unwrap();
        assert_eq!(groups[0], vec![0, 1, 2]);
        assert_eq!(groups[1], vec![3, 4, 5]);
    }

    #[test]
    fn assign_experts_rejects_more_partitions_than_experts() {
        let centroids = vec![vec![1.0, 0.0]; 3];
        let masses = vec![1.0; 3];
        assert!(assign_experts(&centroids, &masses, 2).is_err());
    }

    #[test]
    fn matching_equals_exhaustive_search_on_balanced_bipartitions() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(6);
        // 6 experts, 2 partitions: C(6,3)=20 balanced bipartitions
        for trial in 0..30 {
            let centroids: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let masses: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..5.0)).collect();
            let (_, ours) = assign_experts(&centroids, &masses, 6).unwrap();
            // brute force over all 3-subsets for partition 0
            let mut best = f64::NEG_INFINITY;
            for a in 0..6 {
                for b in (a + 1)..6 {
                    for c in (b + 1)..6 {
                        let set0 = [a, b, c];
                        let score: f64 = (0..6)
                            .map(|e| {
                                let p = if set0.contains(&e) { 0 } else { 1 };
                                masses[p] * centroids[p][e]
                            })
                            .sum();
                        if score > best {
                            best = score;
                        }
                    }
                }
            }
            assert!(
                (ours - best).abs() < 1e-9,
                "trial {trial}: matching {ours} vs brute force {best}"
            );
        }
    }

    #[test]
    fn uniform_affinities_still_match_brute_force() {
        let centroids = vec![vec![0.25; 4], vec![0.25; 4]];
        let masses = vec![2.0, 2.0];
        let (groups, score) = assign_experts(&centroids, &masses, 4).unwrap();
        // any balanced grouping scores the same
        assert!((score - 4.0 * 2.0 * 0.25).abs() < 1e-12);
        assert_eq!(groups.iter().map(|g| g.len()).sum::<usize>(), 4);
    }

    #[test]
    fn placement_picks_overlap_argmax_with_low_tie() {
        let groups = vec![vec![0, 1], vec![2, 3]];
        // all tokens hit partition 0 only
        let d: Vec<RoutingDecision> = (0..4).map(|_| decision(vec![0, 1])).collect();
        assert_eq!(place_sample(&d, &groups, 4).unwrap(), 0);
        // 3 tokens on partition 1, 1 on partition 0
        let d = vec![
            decision(vec![2, 3]),
            decision(vec![2]),
            decision(vec![3]),
            decision(vec![0]),
        ];
        assert_eq!(place_sample(&d, &groups, 4).unwrap(), 1);
        // exact tie -> lowest partition id
        let d = vec![decision(vec![0]), decision(vec![2])];
        assert_eq!(place_sample(&d, &groups, 4).unwrap(), 0);
    }

    #[test]
    fn argmax_overlap_equals_argmin_cost_on_random_instances() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(8);
        let groups = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let map = expert_to_partition(&groups, 8).unwrap();
        for _ in 0..1000 {
            let decisions: Vec<RoutingDecision> = (0..64)
                .map(|_| {
                    let a = rng.random_range(0..8u16);
                    let mut b = rng.random_range(0..8u16);
                    while b == a {
                        b = rng.random_range(0..8u16);
                    }
                    decision(vec![a.min(b), a.max(b)])
                })
                .collect();
            let placed = place_sample(&decisions, &groups, 8).unwrap();
            let cost_at = |p: usize| remote_messages(&decisions, &map, p);
            let min_cost = (0..4).map(cost_at).min().unwrap();
            assert_eq!(
                cost_at(placed),
                min_cost,
                "picked partition must attain the brute-force minimum"
            );
            // algebraic identity: cost(p) = sum |N(t)| - overlap(p)
            let total_parts: u64 = decisions
                .iter()
                .map(|d| {
                    let mut parts: Vec<usize> =
                        d.experts.iter().map(|&e| map[e as usize]).collect();
                    parts.sort_unstable();
                    parts.dedup();
                    parts.len() as u64
                })
                .sum();
            for p in 0..4 {
                assert_eq!(
                    cost_at(p),
                    total_parts - overlap_tokens(&decisions, &map, p) as u64
                );
            }
        }
    }
}
