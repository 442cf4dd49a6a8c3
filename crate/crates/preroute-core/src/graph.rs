//! Arena-based compute graph with reverse-mode differentiation.
//!
//! Every node is a dense [`Tensor`]; ops record their inputs so a single
//! reverse sweep over the arena (which is already topologically ordered)
//! propagates gradients. Parameters live at the bottom of the arena and
//! survive [`Graph::reset`]; activations are truncated each step.

use crate::error::{Error, Result};
use crate::routing::{normalize_gates, top_k_indices, Normalizer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddN { parts: Vec<TensorId> },
    Embed { table: TensorId, ids: Vec<usize> },
    Softmax { a: TensorId },
    LogSoftmax { a: TensorId },
    RmsNorm { a: TensorId, gain: TensorId, eps: f64 },
    Silu { a: TensorId },
    Gelu { a: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    MeanRows { a: TensorId },
    LogSumExpRows { a: TensorId },
    TopKGate {
        scores: TensorId,
        picks: Vec<usize>,
        k: usize,
        norm: Normalizer,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivFromLogits {
        logits: TensorId,
        target_probs: Vec<f64>,
        student_probs: Vec<f64>,
    },
    AttnHead {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        scale: f64,
        causal: bool,
        probs: Vec<f64>,
    },
    ExtractCols { a: TensorId, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize, len: usize },
    ConcatRows { parts: Vec<TensorId> },
    GatherRows { a: TensorId, rows: Vec<usize> },
    ScatterRows { a: TensorId, rows: Vec<usize> },
    GatherGate { gates: TensorId, picks: Vec<(usize, usize)> },
    RowScale { a: TensorId, s: TensorId },
}

#[derive(Debug)]
struct Node {
    t: Tensor,
    op: Op,
    frozen: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params_end: usize,
}

// Row-major f64 GEMM: C = alpha * A(view) * B(view) + beta * C.
fn mm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let x = &data[r * cols..(r + 1) * cols];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable parameter (requires gradient).
    pub fn param(&mut self, mut t: Tensor) -> TensorId {
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Registers a constant input (no gradient ever).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Marks the current arena length as the parameter boundary;
    /// [`Graph::reset`] truncates back to it.
    pub fn mark_params_end(&mut self) {
        self.params_end = self.nodes.len();
    }

    /// Drops all activations, keeping parameters.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.params_end);
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.t.clear_grad();
        }
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].t
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].t.grad()
    }

    pub fn set_data(&mut self, id: TensorId, data: &[f64]) -> Result<()> {
        let t = &mut self.nodes[id.0].t;
        if t.numel() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set-data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn data_mut(&mut self, id: TensorId) -> &mut [f64] {
        self.nodes[id.0].t.data_mut()
    }

    pub fn set_frozen(&mut self, id: TensorId, frozen: bool) {
        self.nodes[id.0].frozen = frozen;
        self.nodes[id.0].t.set_requires_grad(!frozen);
    }

    pub fn is_frozen(&self, id: TensorId) -> bool {
        self.nodes[id.0].frozen
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { t, op, frozen: false });
        id
    }

    fn push_out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> TensorId {
        let mut t = Tensor::new(shape, data).expect("internal: op output shape");
        t.set_requires_grad(requires);
        self.push(t, op)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].t.requires_grad()
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0].t;
        (t.rows(), t.cols())
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm(m, ka, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(vec![m, n], out, req, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(shape, data, req, Op::Add { a, b }))
    }

    /// Adds a `[d]` bias row-wise to `[n,d]`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add-bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bias_data[c];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push_out(shape, data, req, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(shape, data, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::Scale { a, c }))
    }

    pub fn add_n(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or(Error::InvalidValue("add_n", "no inputs".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        let mut req = false;
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            for (o, &x) in data.iter_mut().zip(self.value(p).data()) {
                *o += x;
            }
            req |= self.requires(p);
        }
        Ok(self.push_out(shape, data, req, Op::AddN { parts: parts.to_vec() }))
    }

    /// Row lookup: `out[i,:] = table[ids[i],:]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, d) = self.dims2(table);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding id",
                    index: id,
                    bound: vocab,
                });
            }
        }
        let src = self.value(table).data();
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push_out(
            vec![ids.len(), d],
            data,
            req,
            Op::Embed { table, ids: ids.to_vec() },
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a);
        let data = softmax_rows(self.value(a).data(), rows, cols);
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::Softmax { a }))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a);
        let x = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::LogSoftmax { a }))
    }

    /// RMS normalization over the last dimension with learned gain.
    pub fn rms_norm(&mut self, a: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a);
        if self.value(gain).numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "rms-norm",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv * g[c];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(gain);
        Ok(self.push_out(shape, data, req, Op::RmsNorm { a, gain, eps }))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::Silu { a }))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::Gelu { a }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: shape.to_vec(),
                rhs: vec![2],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push_out(vec![c, r], data, req, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).data().to_vec();
        let req = self.requires(a);
        Ok(self.push_out(shape, data, req, Op::Reshape { a }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        Ok(self.push_out(vec![], vec![s], req, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        let req = self.requires(a);
        Ok(self.push_out(vec![], vec![s], req, Op::MeanAll { a }))
    }

    /// Column means: `[n,d] -> [d]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if n == 0 {
            return Err(Error::InvalidValue("mean_rows", "no rows".into()));
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                data[c] += x[r * d + c];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let req = self.requires(a);
        Ok(self.push_out(vec![d], data, req, Op::MeanRows { a }))
    }

    /// Row-wise log-sum-exp: `[n,d] -> [n]`.
    pub fn logsumexp_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        let x = self.value(a).data();
        let mut data = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            data[r] = m + z.ln();
        }
        let req = self.requires(a);
        Ok(self.push_out(vec![n], data, req, Op::LogSumExpRows { a }))
    }

    /// Top-k gating: selects k experts per row (ties to the lower index,
    /// selection itself is a non-differentiable mask) and normalizes the
    /// selected logits into weights `[n,k]`. Returns the flat ascending
    /// pick indices alongside the weight node.
    pub fn topk_gate(
        &mut self,
        scores: TensorId,
        k: usize,
        norm: Normalizer,
    ) -> Result<(TensorId, Vec<usize>)> {
        let (n, e) = self.dims2(scores);
        if k == 0 || k > e {
            return Err(Error::IndexOutOfRange {
                what: "top_k",
                index: k,
                bound: e,
            });
        }
        let x = self.value(scores).data();
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("router logit", format!("{bad}")));
        }
        let mut picks = Vec::with_capacity(n * k);
        let mut weights = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &x[r * e..(r + 1) * e];
            let idx = top_k_indices(row, k);
            let sel: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
            weights.extend(normalize_gates(&sel, norm));
            picks.extend(idx);
        }
        let req = self.requires(scores);
        let id = self.push_out(
            vec![n, k],
            weights,
            req,
            Op::TopKGate {
                scores,
                picks: picks.clone(),
                k,
                norm,
            },
        );
        Ok((id, picks))
    }

    /// Mean next-token negative log-likelihood over rows of `[n,V]` logits.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (n, v) = self.dims2(logits);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross-entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "target id",
                    index: t,
                    bound: v,
                });
            }
        }
        let probs = softmax_rows(self.value(logits).data(), n, v);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs[r * v + t].max(1e-300).ln();
        }
        loss /= n as f64;
        let req = self.requires(logits);
        Ok(self.push_out(
            vec![],
            vec![loss],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean KL(target || softmax(logits)) over rows; the target distribution
    /// is a detached constant.
    pub fn kl_div_from_logits(&mut self, target_probs: &[f64], logits: TensorId) -> Result<TensorId> {
        let (n, e) = self.dims2(logits);
        if target_probs.len() != n * e {
            return Err(Error::ShapeMismatch {
                op: "kl-div",
                lhs: vec![n, e],
                rhs: vec![target_probs.len()],
            });
        }
        let student_probs = softmax_rows(self.value(logits).data(), n, e);
        let mut loss = 0.0;
        for i in 0..n * e {
            let p = target_probs[i];
            if p > 0.0 {
                loss += p * (p.ln() - student_probs[i].max(1e-300).ln());
            }
        }
        loss /= n as f64;
        let req = self.requires(logits);
        Ok(self.push_out(
            vec![],
            vec![loss],
            req,
            Op::KlDivFromLogits {
                logits,
                target_probs: target_probs.to_vec(),
                student_probs,
            },
        ))
    }

    /// Single-head scaled dot-product attention over one sequence,
    /// `q,k,v: [T,dh]`, optionally causally masked.
    pub fn attn_head(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        causal: bool,
    ) -> Result<TensorId> {
        let (t, dh) = self.dims2(q);
        if self.dims2(k) != (t, dh) || self.dims2(v) != (t, dh) {
            return Err(Error::ShapeMismatch {
                op: "attn-head",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; t * t];
        mm(t, dh, t, scale, self.value(q).data(), false, self.value(k).data(), true, 0.0, &mut scores);
        if causal {
            for i in 0..t {
                for j in (i + 1)..t {
                    scores[i * t + j] = f64::NEG_INFINITY;
                }
            }
        }
        let probs = softmax_rows(&scores, t, t);
        let mut out = vec![0.0; t * dh];
        mm(t, t, dh, 1.0, &probs, false, self.value(v).data(), false, 0.0, &mut out);
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push_out(
            vec![t, dh],
            out,
            req,
            Op::AttnHead {
                q,
                k,
                v,
                scale,
                causal,
                probs,
            },
        ))
    }

    pub fn extract_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if start + len > d {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                bound: d,
            });
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; n * len];
        for r in 0..n {
            data[r * len..(r + 1) * len].copy_from_slice(&x[r * d + start..r * d + start + len]);
        }
        let req = self.requires(a);
        Ok(self.push_out(vec![n, len], data, req, Op::ExtractCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or(Error::InvalidValue("concat_cols", "no inputs".into()))?;
        let (n, _) = self.dims2(first);
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (np, dp) = self.dims2(p);
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: vec![np, dp],
                });
            }
            total += dp;
            req |= self.requires(p);
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let (_, dp) = self.dims2(p);
            let x = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + dp]
                    .copy_from_slice(&x[r * dp..(r + 1) * dp]);
            }
            off += dp;
        }
        Ok(self.push_out(vec![n, total], data, req, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "row slice",
                index: start + len,
                bound: n,
            });
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let req = self.requires(a);
        Ok(self.push_out(vec![len, d], data, req, Op::SliceRows { a, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or(Error::InvalidValue("concat_rows", "no inputs".into()))?;
        let (_, d) = self.dims2(first);
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (np, dp) = self.dims2(p);
            if dp != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![d],
                    rhs: vec![np, dp],
                });
            }
            total += np;
            req |= self.requires(p);
        }
        let mut data = Vec::with_capacity(total * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_out(vec![total, d], data, req, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// `out[i,:] = a[rows[i],:]`.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: r,
                    bound: n,
                });
            }
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let req = self.requires(a);
        Ok(self.push_out(
            vec![rows.len(), d],
            data,
            req,
            Op::GatherRows { a, rows: rows.to_vec() },
        ))
    }

    /// Scatter-add rows of `a` into a zero `[out_rows,d]` tensor:
    /// `out[rows[i],:] += a[i,:]`.
    pub fn scatter_rows(&mut self, a: TensorId, rows: &[usize], out_rows: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if rows.len() != n {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: vec![n, d],
                rhs: vec![rows.len()],
            });
        }
        for &r in rows {
            if r >= out_rows {
                return Err(Error::IndexOutOfRange {
                    what: "scatter row",
                    index: r,
                    bound: out_rows,
                });
            }
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; out_rows * d];
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..d {
                data[r * d + c] += x[i * d + c];
            }
        }
        let req = self.requires(a);
        Ok(self.push_out(
            vec![out_rows, d],
            data,
            req,
            Op::ScatterRows { a, rows: rows.to_vec() },
        ))
    }

    /// Extracts one gate weight per (row, slot) pick: `out[i] = gates[r_i, s_i]`.
    pub fn gather_gate(&mut self, gates: TensorId, picks: &[(usize, usize)]) -> Result<TensorId> {
        let (n, k) = self.dims2(gates);
        for &(r, s) in picks {
            if r >= n || s >= k {
                return Err(Error::IndexOutOfRange {
                    what: "gate pick",
                    index: r * k + s,
                    bound: n * k,
                });
            }
        }
        let x = self.value(gates).data();
        let data: Vec<f64> = picks.iter().map(|&(r, s)| x[r * k + s]).collect();
        let req = self.requires(gates);
        Ok(self.push_out(
            vec![picks.len(), 1],
            data,
            req,
            Op::GatherGate { gates, picks: picks.to_vec() },
        ))
    }

    /// Multiplies each row of `[n,d]` by the matching entry of `[n,1]`.
    pub fn row_scale(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a);
        if self.value(s).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: vec![n, d],
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let x = self.value(a).data();
        let sv = self.value(s).data();
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] = x[r * d + c] * sv[r];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(s);
        Ok(self.push_out(shape, data, req, Op::RowScale { a, s }))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Populates gradients of every `requires_grad` node reachable from the
    /// scalar `loss` with d(loss)/d(node).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.requires(loss) {
            return Ok(());
        }
        self.nodes[loss.0].t.grad_mut()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].t.requires_grad() {
                continue;
            }
            let dy = match self.nodes[i].t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let contribs = self.backward_op(i, &dy)?;
            for (id, c) in contribs {
                let g = self.nodes[id.0].t.grad_mut();
                for (gv, cv) in g.iter_mut().zip(&c) {
                    *gv += cv;
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, dy: &[f64]) -> Result<Vec<(TensorId, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(TensorId, Vec<f64>)> = Vec::new();
        let want = |id: TensorId| self.nodes[id.0].t.requires_grad();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    mm(m, n, k, 1.0, dy, false, self.value(*b).data(), true, 0.0, &mut da);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    mm(k, m, n, 1.0, self.value(*a).data(), true, dy, false, 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if want(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::AddBias { a, bias } => {
                let (n, d) = self.dims2(*a);
                if want(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if want(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += dy[r * d + c];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let da: Vec<f64> = dy.iter().zip(self.value(*b).data()).map(|(g, x)| g * x).collect();
                    out.push((*a, da));
                }
                if want(*b) {
                    let db: Vec<f64> = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    out.push((*b, db));
                }
            }
            Op::Scale { a, c } => {
                if want(*a) {
                    out.push((*a, dy.iter().map(|g| g * c).collect()));
                }
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if want(p) {
                        out.push((p, dy.to_vec()));
                    }
                }
            }
            Op::Embed { table, ids } => {
                if want(*table) {
                    let (vocab, d) = self.dims2(*table);
                    let mut dt = vec![0.0; vocab * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += dy[i * d + c];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Softmax { a } => {
                if want(*a) {
                    let (rows, cols) = self.dims2(*a);
                    let y = node.t.data();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &dy[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::LogSoftmax { a } => {
                if want(*a) {
                    let (rows, cols) = self.dims2(*a);
                    let y = node.t.data();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &dy[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            da[r * cols + c] = gr[c] - y[r * cols + c].exp() * gsum;
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let (rows, cols) = self.dims2(*a);
                let x = self.value(*a).data();
                let g = self.value(*gain).data();
                if want(*a) {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let gr = &dy[r * cols..(r + 1) * cols];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                        let rms = (ms + eps).sqrt();
                        let dot: f64 = (0..cols).map(|c| gr[c] * g[c] * row[c]).sum();
                        for c in 0..cols {
                            da[r * cols + c] =
                                gr[c] * g[c] / rms - row[c] * dot / (rms * rms * rms * cols as f64);
                        }
                    }
                    out.push((*a, da));
                }
                if want(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let gr = &dy[r * cols..(r + 1) * cols];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                        let rms = (ms + eps).sqrt();
                        for c in 0..cols {
                            dg[c] += gr[c] * row[c] / rms;
                        }
                    }
                    out.push((*gain, dg));
                }
            }
            Op::Silu { a } => {
                if want(*a) {
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    out.push((*a, da));
                }
            }
            Op::Gelu { a } => {
                if want(*a) {
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| g * gelu_bwd(x))
                        .collect();
                    out.push((*a, da));
                }
            }
            Op::Transpose { a } => {
                if want(*a) {
                    let (r, c) = self.dims2(*a);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = dy[j * r + i];
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::Reshape { a } => {
                if want(*a) {
                    out.push((*a, dy.to_vec()));
                }
            }
            Op::SumAll { a } => {
                if want(*a) {
                    out.push((*a, vec![dy[0]; self.value(*a).numel()]));
                }
            }
            Op::MeanAll { a } => {
                if want(*a) {
                    let n = self.value(*a).numel();
                    out.push((*a, vec![dy[0] / n as f64; n]));
                }
            }
            Op::MeanRows { a } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            da[r * d + c] = dy[c] / n as f64;
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::LogSumExpRows { a } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let probs = softmax_rows(self.value(*a).data(), n, d);
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            da[r * d + c] = dy[r] * probs[r * d + c];
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::TopKGate { scores, picks, k, norm } => {
                if want(*scores) {
                    let (n, e) = self.dims2(*scores);
                    let w = node.t.data();
                    let mut ds = vec![0.0; n * e];
                    for r in 0..n {
                        let wr = &w[r * k..(r + 1) * k];
                        let gr = &dy[r * k..(r + 1) * k];
                        match norm {
                            Normalizer::Softmax => {
                                let dot: f64 = wr.iter().zip(gr).map(|(w, g)| w * g).sum();
                                for j in 0..*k {
                                    ds[r * e + picks[r * k + j]] = wr[j] * (gr[j] - dot);
                                }
                            }
                            Normalizer::Sigmoid => {
                                for j in 0..*k {
                                    ds[r * e + picks[r * k + j]] = gr[j] * wr[j] * (1.0 - wr[j]);
                                }
                            }
                        }
                    }
                    out.push((*scores, ds));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if want(*logits) {
                    let (n, v) = self.dims2(*logits);
                    let mut dl = vec![0.0; n * v];
                    let scale = dy[0] / n as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let delta = if c == t { 1.0 } else { 0.0 };
                            dl[r * v + c] = scale * (probs[r * v + c] - delta);
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::KlDivFromLogits { logits, target_probs, student_probs } => {
                if want(*logits) {
                    let (n, e) = self.dims2(*logits);
                    let mut dl = vec![0.0; n * e];
                    let scale = dy[0] / n as f64;
                    for idx in 0..n * e {
                        dl[idx] = scale * (student_probs[idx] - target_probs[idx]);
                    }
                    out.push((*logits, dl));
                }
            }
            Op::AttnHead { q, k, v, scale, causal, probs } => {
                let (t, dh) = self.dims2(*q);
                // dP = dY V^T ; dV = P^T dY
                let mut dp = vec![0.0; t * t];
                mm(t, dh, t, 1.0, dy, false, self.value(*v).data(), true, 0.0, &mut dp);
                if want(*v) {
                    let mut dv = vec![0.0; t * dh];
                    mm(t, t, dh, 1.0, probs, true, dy, false, 0.0, &mut dv);
                    out.push((*v, dv));
                }
                // dS = softmax backward rows (masked entries have P=0)
                let mut ds = vec![0.0; t * t];
                for r in 0..t {
                    let pr = &probs[r * t..(r + 1) * t];
                    let gr = &dp[r * t..(r + 1) * t];
                    let lim = if *causal { r + 1 } else { t };
                    let dot: f64 = pr[..lim].iter().zip(&gr[..lim]).map(|(p, g)| p * g).sum();
                    for c in 0..lim {
                        ds[r * t + c] = pr[c] * (gr[c] - dot);
                    }
                }
                if want(*q) {
                    let mut dq = vec![0.0; t * dh];
                    mm(t, t, dh, *scale, &ds, false, self.value(*k).data(), false, 0.0, &mut dq);
                    out.push((*q, dq));
                }
                if want(*k) {
                    let mut dk = vec![0.0; t * dh];
                    mm(t, t, dh, *scale, &ds, true, self.value(*q).data(), false, 0.0, &mut dk);
                    out.push((*k, dk));
                }
            }
            Op::ExtractCols { a, start, len } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..*len {
                            da[r * d + start + c] = dy[r * len + c];
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::ConcatCols { parts } => {
                let n = node.t.rows();
                let total = node.t.cols();
                let mut off = 0;
                for &p in parts {
                    let (_, dp) = self.dims2(p);
                    if want(p) {
                        let mut dpart = vec![0.0; n * dp];
                        for r in 0..n {
                            dpart[r * dp..(r + 1) * dp]
                                .copy_from_slice(&dy[r * total + off..r * total + off + dp]);
                        }
                        out.push((p, dpart));
                    }
                    off += dp;
                }
            }
            Op::SliceRows { a, start, len } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let mut da = vec![0.0; n * d];
                    da[start * d..(start + len) * d].copy_from_slice(dy);
                    out.push((*a, da));
                }
            }
            Op::ConcatRows { parts } => {
                let d = node.t.cols();
                let mut off = 0;
                for &p in parts {
                    let (np, _) = self.dims2(p);
                    if want(p) {
                        out.push((p, dy[off * d..(off + np) * d].to_vec()));
                    }
                    off += np;
                }
            }
            Op::GatherRows { a, rows } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let mut da = vec![0.0; n * d];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            da[r * d + c] += dy[i * d + c];
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::ScatterRows { a, rows } => {
                if want(*a) {
                    let (n, d) = self.dims2(*a);
                    let mut da = vec![0.0; n * d];
                    for (i, &r) in rows.iter().enumerate() {
                        da[i * d..(i + 1) * d].copy_from_slice(&dy[r * d..(r + 1) * d]);
                    }
                    out.push((*a, da));
                }
            }
            Op::GatherGate { gates, picks } => {
                if want(*gates) {
                    let (n, k) = self.dims2(*gates);
                    let mut dg = vec![0.0; n * k];
                    for (i, &(r, s)) in picks.iter().enumerate() {
                        dg[r * k + s] += dy[i];
                    }
                    out.push((*gates, dg));
                }
            }
            Op::RowScale { a, s } => {
                let (n, d) = self.dims2(*a);
                let sv = self.value(*s).data();
                if want(*a) {
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            da[r * d + c] = dy[r * d + c] * sv[r];
                        }
                    }
                    out.push((*a, da));
                }
                if want(*s) {
                    let x = self.value(*a).data();
                    let mut dsv = vec![0.0; n];
                    for r in 0..n {
                        for c in 0..d {
                            dsv[r] += dy[r * d + c] * x[r * d + c];
                        }
                    }
                    out.push((*s, dsv));
                }
            }
        }
        Ok(out)
    }
}

// Tanh-approximation GELU.
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
