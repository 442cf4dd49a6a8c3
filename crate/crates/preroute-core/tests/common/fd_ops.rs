//! Finite-difference sweeps for every differentiable op, shared between the
//! per-op gradient test file and the acceptance suite.

#![allow(dead_code)]

use preroute_core::routing::Normalizer;
use rand::Rng;

use super::{fd_check, rand_data, rand_separated, scalarize, seeded};

pub fn sweep_matmul(instances: usize, tol: f64) {
    let mut rng = seeded(101);
    for _ in 0..instances {
        let (m, k) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let n = rng.random_range(1..=8);
        let a = (vec![m, k], rand_data(&mut rng, m * k));
        let b = (vec![k, n], rand_data(&mut rng, k * n));
        let mut srng = seeded(rng.random());
        fd_check("matmul", &[a, b], tol, |g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
    }
}

pub fn sweep_add_mul(instances: usize, tol: f64) {
    let mut rng = seeded(102);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let b = (vec![m, n], rand_data(&mut rng, m * n));
        let mut srng = seeded(rng.random());
        fd_check("add", &[a.clone(), b.clone()], tol, |g, ids| {
            let y = g.add(ids[0], ids[1]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("mul", &[a, b], tol, |g, ids| {
            let y = g.mul(ids[0], ids[1]).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
    }
}

pub fn sweep_bias_scale_addn(instances: usize, tol: f64) {
    let mut rng = seeded(103);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let b = (vec![n], rand_data(&mut rng, n));
        let mut srng = seeded(rng.random());
        fd_check("add_bias", &[a.clone(), b], tol, |g, ids| {
            let y = g.add_bias(ids[0], ids[1]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let c = rng.random_range(-2.0..2.0);
        let mut srng2 = seeded(rng.random());
        fd_check("scale", &[a.clone()], tol, |g, ids| {
            let y = g.scale(ids[0], c).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
        let p2 = (vec![m, n], rand_data(&mut rng, m * n));
        let p3 = (vec![m, n], rand_data(&mut rng, m * n));
        let mut srng3 = seeded(rng.random());
        fd_check("add_n", &[a, p2, p3], tol, |g, ids| {
            let y = g.add_n(ids).unwrap();
            scalarize(g, y, &mut srng3.clone())
        });
    }
}

pub fn sweep_embed(instances: usize, tol: f64) {
    let mut rng = seeded(104);
    for _ in 0..instances {
        let (vocab, d) = (rng.random_range(2..=8), rng.random_range(1..=8));
        let n_ids = rng.random_range(1..=8);
        let ids: Vec<usize> = (0..n_ids).map(|_| rng.random_range(0..vocab)).collect();
        let table = (vec![vocab, d], rand_data(&mut rng, vocab * d));
        let mut srng = seeded(rng.random());
        fd_check("embed", &[table], tol, |g, tids| {
            let y = g.embed(tids[0], &ids).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
    }
}

pub fn sweep_softmaxes(instances: usize, tol: f64) {
    let mut rng = seeded(105);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let mut srng = seeded(rng.random());
        fd_check("softmax", &[a.clone()], tol, |g, ids| {
            let y = g.softmax(ids[0]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("log_softmax", &[a], tol, |g, ids| {
            let y = g.log_softmax(ids[0]).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
    }
}

pub fn sweep_rms_norm(instances: usize, tol: f64) {
    let mut rng = seeded(106);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let gain = (vec![n], rand_data(&mut rng, n));
        let mut srng = seeded(rng.random());
        fd_check("rms_norm", &[a, gain], tol, |g, ids| {
            let y = g.rms_norm(ids[0], ids[1], 1e-6).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
    }
}

pub fn sweep_activations(instances: usize, tol: f64) {
    let mut rng = seeded(107);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let mut srng = seeded(rng.random());
        fd_check("silu", &[a.clone()], tol, |g, ids| {
            let y = g.silu(ids[0]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("gelu", &[a], tol, |g, ids| {
            let y = g.gelu(ids[0]).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
    }
}

pub fn sweep_shape_ops(instances: usize, tol: f64) {
    let mut rng = seeded(108);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        let mut srng = seeded(rng.random());
        fd_check("transpose", &[a.clone()], tol, |g, ids| {
            let y = g.transpose(ids[0]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("reshape", &[a.clone()], tol, |g, ids| {
            let y = g.reshape(ids[0], vec![n * m]).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
        let start = rng.random_range(0..n);
        let len = rng.random_range(1..=n - start);
        let mut srng3 = seeded(rng.random());
        fd_check("extract_cols", &[a.clone()], tol, |g, ids| {
            let y = g.extract_cols(ids[0], start, len).unwrap();
            scalarize(g, y, &mut srng3.clone())
        });
        let rstart = rng.random_range(0..m);
        let rlen = rng.random_range(1..=m - rstart);
        let mut srng4 = seeded(rng.random());
        fd_check("slice_rows", &[a], tol, |g, ids| {
            let y = g.slice_rows(ids[0], rstart, rlen).unwrap();
            scalarize(g, y, &mut srng4.clone())
        });
    }
}

pub fn sweep_concats(instances: usize, tol: f64) {
    let mut rng = seeded(109);
    for _ in 0..instances {
        let m = rng.random_range(1..=8);
        let d1 = rng.random_range(1..=8);
        let d2 = rng.random_range(1..=8);
        let a = (vec![m, d1], rand_data(&mut rng, m * d1));
        let b = (vec![m, d2], rand_data(&mut rng, m * d2));
        let mut srng = seeded(rng.random());
        fd_check("concat_cols", &[a, b], tol, |g, ids| {
            let y = g.concat_cols(ids).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let d = rng.random_range(1..=8);
        let m1 = rng.random_range(1..=8);
        let m2 = rng.random_range(1..=8);
        let a = (vec![m1, d], rand_data(&mut rng, m1 * d));
        let b = (vec![m2, d], rand_data(&mut rng, m2 * d));
        let mut srng2 = seeded(rng.random());
        fd_check("concat_rows", &[a, b], tol, |g, ids| {
            let y = g.concat_rows(ids).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
    }
}

pub fn sweep_reductions(instances: usize, tol: f64) {
    let mut rng = seeded(110);
    for _ in 0..instances {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, n], rand_data(&mut rng, m * n));
        fd_check("sum_all", &[a.clone()], tol, |g, ids| g.sum_all(ids[0]).unwrap());
        fd_check("mean_all", &[a.clone()], tol, |g, ids| {
            g.mean_all(ids[0]).unwrap()
        });
        let mut srng = seeded(rng.random());
        fd_check("mean_rows", &[a.clone()], tol, |g, ids| {
            let y = g.mean_rows(ids[0]).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("logsumexp_rows", &[a], tol, |g, ids| {
            let y = g.logsumexp_rows(ids[0]).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
    }
}

pub fn sweep_topk_gate(instances: usize, tol: f64) {
    let mut rng = seeded(111);
    for _ in 0..instances {
        let e = rng.random_range(2..=8);
        let rows = rng.random_range(1..=6);
        let k = rng.random_range(1..=e);
        let a = (vec![rows, e], rand_separated(&mut rng, rows, e, 0.05));
        let mut srng = seeded(rng.random());
        fd_check("topk_gate/softmax", &[a.clone()], tol, |g, ids| {
            let (w, _) = g.topk_gate(ids[0], k, Normalizer::Softmax).unwrap();
            scalarize(g, w, &mut srng.clone())
        });
        let mut srng2 = seeded(rng.random());
        fd_check("topk_gate/sigmoid", &[a], tol, |g, ids| {
            let (w, _) = g.topk_gate(ids[0], k, Normalizer::Sigmoid).unwrap();
            scalarize(g, w, &mut srng2.clone())
        });
    }
}

pub fn sweep_losses(instances: usize, tol: f64) {
    let mut rng = seeded(112);
    for _ in 0..instances {
        let (m, v) = (rng.random_range(1..=6), rng.random_range(2..=8));
        let logits = (vec![m, v], rand_data(&mut rng, m * v));
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..v)).collect();
        fd_check("cross_entropy", &[logits.clone()], tol, |g, ids| {
            g.cross_entropy(ids[0], &targets).unwrap()
        });
        let mut target_probs = vec![0.0; m * v];
        for r in 0..m {
            let mut row: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            target_probs[r * v..(r + 1) * v].copy_from_slice(&row);
        }
        fd_check("kl_div_from_logits", &[logits], tol, |g, ids| {
            g.kl_div_from_logits(&target_probs, ids[0]).unwrap()
        });
    }
}

pub fn sweep_attention(instances: usize, tol: f64) {
    let mut rng = seeded(113);
    for _ in 0..instances {
        let t = rng.random_range(1..=6);
        let dh = rng.random_range(1..=6);
        let q = (vec![t, dh], rand_data(&mut rng, t * dh));
        let k = (vec![t, dh], rand_data(&mut rng, t * dh));
        let v = (vec![t, dh], rand_data(&mut rng, t * dh));
        for causal in [true, false] {
            let mut srng = seeded(rng.random());
            fd_check(
                if causal { "attn_head/causal" } else { "attn_head/bidir" },
                &[q.clone(), k.clone(), v.clone()],
                tol,
                |g, ids| {
                    let y = g.attn_head(ids[0], ids[1], ids[2], causal).unwrap();
                    scalarize(g, y, &mut srng.clone())
                },
            );
        }
    }
}

pub fn sweep_gather_scatter(instances: usize, tol: f64) {
    let mut rng = seeded(114);
    for _ in 0..instances {
        let (m, d) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = (vec![m, d], rand_data(&mut rng, m * d));
        let n_rows = rng.random_range(1..=8);
        let rows: Vec<usize> = (0..n_rows).map(|_| rng.random_range(0..m)).collect();
        let mut srng = seeded(rng.random());
        fd_check("gather_rows", &[a.clone()], tol, |g, ids| {
            let y = g.gather_rows(ids[0], &rows).unwrap();
            scalarize(g, y, &mut srng.clone())
        });
        let out_rows = m + rng.random_range(0..4);
        let srows: Vec<usize> = (0..m).map(|_| rng.random_range(0..out_rows)).collect();
        let mut srng2 = seeded(rng.random());
        fd_check("scatter_rows", &[a.clone()], tol, |g, ids| {
            let y = g.scatter_rows(ids[0], &srows, out_rows).unwrap();
            scalarize(g, y, &mut srng2.clone())
        });
        let s = (vec![m, 1], rand_data(&mut rng, m));
        let mut srng3 = seeded(rng.random());
        fd_check("row_scale", &[a.clone(), s], tol, |g, ids| {
            let y = g.row_scale(ids[0], ids[1]).unwrap();
            scalarize(g, y, &mut srng3.clone())
        });
        let kcols = rng.random_range(1..=d);
        let gates = (vec![m, kcols], rand_data(&mut rng, m * kcols));
        let picks: Vec<(usize, usize)> = (0..rng.random_range(1..=8))
            .map(|_| (rng.random_range(0..m), rng.random_range(0..kcols)))
            .collect();
        let mut srng4 = seeded(rng.random());
        fd_check("gather_gate", &[gates], tol, |g, ids| {
            let y = g.gather_gate(ids[0], &picks).unwrap();
            scalarize(g, y, &mut srng4.clone())
        });
    }
}

/// Every differentiable op, `instances` random cases each.
pub fn full_sweep(instances: usize, tol: f64) {
    sweep_matmul(instances, tol);
    sweep_add_mul(instances, tol);
    sweep_bias_scale_addn(instances, tol);
    sweep_embed(instances, tol);
    sweep_softmaxes(instances, tol);
    sweep_rms_norm(instances, tol);
    sweep_activations(instances, tol);
    sweep_shape_ops(instances, tol);
    sweep_concats(instances, tol);
    sweep_reductions(instances, tol);
    sweep_topk_gate(instances, tol);
    sweep_losses(instances, tol);
    sweep_attention(instances, tol);
    sweep_gather_scatter(instances, tol);
}
