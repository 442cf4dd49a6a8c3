//! Exact linear assignment via the potential-based shortest-augmenting-path
//! Hungarian algorithm, O(n^3).

use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a square cost matrix.
/// Returns `assign[row] = col`.
pub fn solve_min(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    for row in cost {
        if row.len() != n {
            return Err(Error::ShapeMismatch {
                op: "hungarian",
                lhs: vec![n, n],
                rhs: vec![row.len()],
            });
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("assignment cost", format!("{bad}")));
        }
    }

    // 1-indexed potentials; p[j] = row matched to column j, 0 = unmatched
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Maximum-score perfect matching (negated costs).
pub fn solve_max(score: &[Vec<f64>]) -> Result<Vec<usize>> {
    let neg: Vec<Vec<f64>> = score
        .iter()
        .map(|row| row.iter().map(|&s| -s).collect())
        .collect();
    solve_min(&neg)
}

pub fn total_score(score: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| score[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(xs: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == xs.len() {
            f(xs);
            return;
        }
        for i in k..xs.len() {
            xs.swap(k, i);
            permute(xs, k + 1, f);
            xs.swap(k, i);
        }
    }

    #[test]
    fn known_small_instance() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let assign = solve_min(&cost).unwrap();
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0); // 1 + 2 + 2
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::rng_from_seed(99);
        for trial in 0..200 {
            let n = rng.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            let assign = solve_min(&cost).unwrap();
            // valid permutation
            let mut seen = vec![false; n];
            for &j in &assign {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let best = brute_force_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {trial}: got {total}, brute force {best}"
            );
        }
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(solve_min(&[vec![1.0, 2.0]]).is_err());
        assert!(solve_min(&[vec![f64::NAN]]).is_err());
    }
}
