//! Shared test utilities: an independent central-finite-difference oracle
//! for gradient checks. The oracle only drives the public forward API and
//! never inspects the engine's backward rules.

#![allow(dead_code)]

pub mod fd_ops;

use preroute_core::graph::{Graph, TensorId};
use preroute_core::rng::rng_from_seed;
use preroute_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-6;

/// One gradient-check instance: fixed input buffers plus a closure that
/// rebuilds the loss graph from scratch for any values of those inputs.
pub fn fd_check<F>(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let build = |datas: &[Vec<f64>]| -> (Graph, Vec<TensorId>, TensorId) {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| g.param(Tensor::new(shape.clone(), data.clone()).unwrap()))
            .collect();
        let loss = f(&mut g, &ids);
        (g, ids, loss)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (mut g, ids, loss) = build(&base);
    assert!(
        g.value(loss).is_scalar(),
        "{name}: fd_check loss must be scalar"
    );
    g.backward(loss).unwrap();

    for (which, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(*id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].1.len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for e in 0..numeric.len() {
            let mut plus = base.clone();
            plus[which][e] += FD_H;
            let (gp, _, lp) = build(&plus);
            let fp = gp.value(lp).data()[0];
            let mut minus = base.clone();
            minus[which][e] -= FD_H;
            let (gm, _, lm) = build(&minus);
            let fm = gm.value(lm).data()[0];
            numeric[e] = (fp - fm) / (2.0 * FD_H);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        assert!(
            rel < tol,
            "{name}: input {which} gradient mismatch, rel err {rel:.3e} (analytic norm {na:.3e}, numeric norm {nn:.3e})"
        );
    }
}

/// Scalarizes a tensor output as a fixed random linear functional so every
/// output element contributes to the checked loss.
pub fn scalarize(g: &mut Graph, out: TensorId, rng: &mut ChaCha8Rng) -> TensorId {
    let n = g.value(out).numel();
    let shape = g.value(out).shape().to_vec();
    let coeffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = g.constant(Tensor::new(shape, coeffs).unwrap());
    let prod = g.mul(out, c).unwrap();
    g.sum_all(prod).unwrap()
}

pub fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Random data with all pairwise gaps (per row of `cols`) at least `gap`,
/// so top-k selections cannot flip under the FD perturbation.
pub fn rand_separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).all(|w| w[1] - w[0] >= gap) {
                out.extend(row);
                break;
            }
        }
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    rng_from_seed(seed)
}
