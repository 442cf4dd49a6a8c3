//! Hybrid sequence clustering: seeded k-means++ into up to 100 initial
//! clusters, then mass-weighted agglomerative merging of the centroids down
//! to the requested count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone)]
pub struct Clustering {
    /// Final cluster centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Points per final cluster.
    pub masses: Vec<f64>,
    /// Final cluster of each input point.
    pub membership: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then D^2-weighted; degenerate
/// all-zero weights fall back to the lowest-index unchosen point.
fn kmeanspp_seeds(points: &[Vec<f64>], k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !taken[*i]).map(|(_, d)| d).sum();
        let next = if total > 0.0 {
            let mut pick = rng.random_range(0.0..total);
            let mut sel = None;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                if pick < d2[i] {
                    sel = Some(i);
                    break;
                }
                pick -= d2[i];
            }
            sel.unwrap_or_else(|| (0..n).find(|&i| !taken[i]).unwrap())
        } else {
            (0..n).find(|&i| !taken[i]).unwrap()
        };
        chosen.push(next);
        taken[next] = true;
        for i in 0..n {
            let d = sq_dist(&points[i], &points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

/// Seeded k-means++ plus Lloyd iterations.
fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = points.len();
    let dim = points[0].len();
    let seeds = kmeanspp_seeds(points, k, rng);
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![0usize; n];
    for _ in 0..60 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster with the point farthest from its
                // current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assign[a]])
                            .partial_cmp(&sq_dist(&points[b], &centroids[assign[b]]))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                assign[far] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (centroids, assign)
}

/// Average-linkage agglomerative merge of weighted centroids down to
/// `n_final`, Euclidean distance, ties to the lexicographically first pair.
fn agglomerate(
    mut centroids: Vec<Vec<f64>>,
    mut masses: Vec<f64>,
    n_final: usize,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    // remap[i] tracks where original cluster i ended up
    let n0 = centroids.len();
    let mut remap: Vec<usize> = (0..n0).collect();
    let mut alive: Vec<bool> = vec![true; n0];
    let mut alive_count = n0;
    while alive_count > n_final {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n0 {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..n0 {
                if !alive[j] {
                    continue;
                }
                let d = sq_dist(&centroids[i], &centroids[j]);
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => d < bd || (d == bd && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("at least two alive clusters");
        let (mi, mj) = (masses[i], masses[j]);
        let total = mi + mj;
        let merged: Vec<f64> = centroids[i]
            .iter()
            .zip(&centroids[j])
            .map(|(a, b)| (a * mi + b * mj) / total)
            .collect();
        centroids[i] = merged;
        masses[i] = total;
        alive[j] = false;
        alive_count -= 1;
        for r in remap.iter_mut() {
            if *r == j {
                *r = i;
            }
        }
    }
    // compact the survivors in index order
    let mut compact_ids = vec![usize::MAX; n0];
    let mut out_centroids = Vec::with_capacity(n_final);
    let mut out_masses = Vec::with_capacity(n_final);
    for i in 0..n0 {
        if alive[i] {
            compact_ids[i] = out_centroids.len();
            out_centroids.push(centroids[i].clone());
            out_masses.push(masses[i]);
        }
    }
    let final_remap: Vec<usize> = remap.iter().map(|&r| compact_ids[r]).collect();
    (out_centroids, out_masses, final_remap)
}

/// Clusters affinity vectors into exactly `n_final` groups.
pub fn cluster(
    points: &[Vec<f64>],
    n_final: usize,
    init_clusters: usize,
    seed: u64,
) -> Result<Clustering> {
    if n_final == 0 {
        return Err(Error::InvalidConfig("need at least one cluster".into()));
    }
    if points.len() < n_final {
        return Err(Error::InvalidConfig(format!(
            "cannot form {n_final} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "cluster",
            lhs: vec![dim],
            rhs: vec![points.iter().map(|p| p.len()).max().unwrap_or(0)],
        });
    }
    let k0 = init_clusters.max(n_final).min(points.len());
    let mut rng = rng_from_seed(seed);
    let (centroids, assign) = kmeans(points, k0, &mut rng);
    // drop empty clusters before merging
    let mut counts = vec![0f64; centroids.len()];
    for &a in &assign {
        counts[a] += 1.0;
    }
    let mut kept = Vec::new();
    let mut kept_masses = Vec::new();
    let mut kept_ids = vec![usize::MAX; centroids.len()];
    for (c, centroid) in centroids.into_iter().enumerate() {
        if counts[c] > 0.0 {
            kept_ids[c] = kept.len();
            kept.push(centroid);
            kept_masses.push(counts[c]);
        }
    }
    if kept.len() < n_final {
        return Err(Error::InvalidConfig(format!(
            "only {} distinct clusters formed, need {n_final}",
            kept.len()
        )));
    }
    let (out_centroids, out_masses, remap) = agglomerate(kept, kept_masses, n_final);
    let membership: Vec<usize> = assign.iter().map(|&a| remap[kept_ids[a]]).collect();
    Ok(Clustering {
        centroids: out_centroids,
        masses: out_masses,
        membership,
    })
}

/// Within-cluster sum of squares for a given membership.
pub fn wcss(points: &[Vec<f64>], membership: &[usize], n_clusters: usize) -> f64 {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (p, &m) in points.iter().zip(membership) {
        counts[m] += 1;
        for (s, &x) in sums[m].iter_mut().zip(p) {
            *s += x;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                s.clone()
            } else {
                s.iter().map(|v| v / c as f64).collect()
            }
        })
        .collect();
    points
        .iter()
        .zip(membership)
        .map(|(p, &m)| sq_dist(p, &centroids[m]))
        .sum()
}
