//! The standalone structure extractor: a bidirectional encoder distilled
//! from a source model's first-layer router, then frozen as a fixed routing
//! prior for target training. Only its final projection is touched by the
//! load-balance tuning pass.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    blobs_checksum, expect_magic, read_blobs, read_u32, write_blobs, write_magic, write_u32, Blob,
    FORMAT_VERSION,
};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::MoeModel;
use crate::optim::{Optimizer, OptimizerKind, ParamSet, Schedule};
use crate::rng::{derive_seed, fill_normal, rng_from_seed};
use crate::routing::{aux_loss, route_token, Normalizer, RoutingDecision};
use crate::tensor::Tensor;
use crate::train::RouteProvider;

const MAGIC: &[u8] = b"GRTC-CKPT";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GrouterConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Encoder block count N.
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Output expert count (columns of the score projection).
    pub num_experts_out: usize,
    pub use_positions: bool,
    pub max_seq_len: usize,
}

impl GrouterConfig {
    pub fn desk_default(vocab_size: usize, num_experts_out: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            num_experts_out,
            use_positions: true,
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidConfig("need at least one encoder block".into()));
        }
        if self.num_experts_out == 0 {
            return Err(Error::InvalidConfig("need at least one output expert".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncBlockIds {
    norm1: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    norm2: TensorId,
    w1: TensorId,
    w2: TensorId,
}

pub struct Grouter {
    pub config: GrouterConfig,
    embed: TensorId,
    pos: TensorId,
    blocks: Vec<EncBlockIds>,
    final_norm: TensorId,
    w_s: TensorId,
    /// All parameters, W_s last.
    pub params: ParamSet,
    pub frozen: bool,
}

impl Grouter {
    pub fn init(g: &mut Graph, config: GrouterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let fh = 4 * d;
        let dstd = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();

        let mut embed_t = Tensor::zeros(vec![config.vocab_size, d]);
        fill_normal(rng, 0.02, embed_t.data_mut());
        let embed = g.param(embed_t);
        params.add("embed", embed);
        let mut pos_t = Tensor::zeros(vec![config.max_seq_len, d]);
        fill_normal(rng, 0.02, pos_t.data_mut());
        let pos = g.param(pos_t);
        params.add("pos", pos);

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let mk = |g: &mut Graph, rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
                let mut t = Tensor::zeros(vec![rows, cols]);
                fill_normal(rng, std, t.data_mut());
                g.param(t)
            };
            let norm1 = g.param(Tensor::new(vec![d], vec![1.0; d]).unwrap());
            let wq = mk(g, rng, d, d, dstd);
            let wk = mk(g, rng, d, d, dstd);
            let wv = mk(g, rng, d, d, dstd);
            let wo = mk(g, rng, d, d, dstd);
            let norm2 = g.param(Tensor::new(vec![d], vec![1.0; d]).unwrap());
            let w1 = mk(g, rng, d, fh, dstd);
            let w2 = mk(g, rng, fh, d, 1.0 / (fh as f64).sqrt());
            params.add(format!("block{b}.norm1"), norm1);
            params.add(format!("block{b}.wq"), wq);
            params.add(format!("block{b}.wk"), wk);
            params.add(format!("block{b}.wv"), wv);
            params.add(format!("block{b}.wo"), wo);
            params.add(format!("block{b}.norm2"), norm2);
            params.add(format!("block{b}.w1"), w1);
            params.add(format!("block{b}.w2"), w2);
            blocks.push(EncBlockIds {
                norm1,
                wq,
                wk,
                wv,
                wo,
                norm2,
                w1,
                w2,
            });
        }
        let final_norm = g.param(Tensor::new(vec![d], vec![1.0; d]).unwrap());
        params.add("final_norm", final_norm);
        let mut ws_t = Tensor::zeros(vec![d, config.num_experts_out]);
        fill_normal(rng, dstd, ws_t.data_mut());
        let w_s = g.param(ws_t);
        params.add("w_s", w_s);

        Ok(Self {
            config,
            embed,
            pos,
            blocks,
            final_norm,
            w_s,
            params,
            frozen: false,
        })
    }

    pub fn score_layer(&self) -> TensorId {
        self.w_s
    }

    /// Raw routing scores `[tokens, E_out]` with full-sequence (bidirectional)
    /// attention context.
    pub fn forward(&self, g: &mut Graph, tokens: &[u16], batch: usize) -> Result<TensorId> {
        if tokens.is_empty() {
            return Err(Error::InvalidValue("grouter input", "empty sequence".into()));
        }
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "grouter-batch",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let len = tokens.len() / batch;
        if self.config.use_positions && len > self.config.max_seq_len {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: len,
                bound: self.config.max_seq_len,
            });
        }
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = g.embed(self.embed, &ids)?;
        if self.config.use_positions {
            let positions: Vec<usize> = (0..n).map(|i| i % len).collect();
            let pos = g.embed(self.pos, &positions)?;
            x = g.add(x, pos)?;
        }
        let dh = self.config.embed_dim / self.config.num_heads;
        for block in &self.blocks {
            let xn = g.rms_norm(x, block.norm1, 1e-6)?;
            let q = g.matmul(xn, block.wq)?;
            let k = g.matmul(xn, block.wk)?;
            let v = g.matmul(xn, block.wv)?;
            let mut seq_outs = Vec::with_capacity(batch);
            for b in 0..batch {
                let qs = g.slice_rows(q, b * len, len)?;
                let ks = g.slice_rows(k, b * len, len)?;
                let vs = g.slice_rows(v, b * len, len)?;
                let mut heads = Vec::with_capacity(self.config.num_heads);
                for h in 0..self.config.num_heads {
                    let qh = g.extract_cols(qs, h * dh, dh)?;
                    let kh = g.extract_cols(ks, h * dh, dh)?;
                    let vh = g.extract_cols(vs, h * dh, dh)?;
                    // encoder attention: every position sees the whole sequence
                    heads.push(g.attn_head(qh, kh, vh, false)?);
                }
                seq_outs.push(g.concat_cols(&heads)?);
            }
            let attn = g.concat_rows(&seq_outs)?;
            let attn_out = g.matmul(attn, block.wo)?;
            x = g.add(x, attn_out)?;
            let xn = g.rms_norm(x, block.norm2, 1e-6)?;
            let h1 = g.matmul(xn, block.w1)?;
            let h1s = g.silu(h1)?;
            let h2 = g.matmul(h1s, block.w2)?;
            x = g.add(x, h2)?;
        }
        let xn = g.rms_norm(x, self.final_norm, 1e-6)?;
        g.matmul(xn, self.w_s)
    }

    /// Top-k decisions per token.
    pub fn route_tokens(
        &self,
        g: &mut Graph,
        tokens: &[u16],
        batch: usize,
        k: usize,
        normalizer: Normalizer,
    ) -> Result<Vec<RoutingDecision>> {
        let scores = self.forward(g, tokens, batch)?;
        let e = self.config.num_experts_out;
        let data = g.value(scores).data();
        (0..tokens.len())
            .map(|t| route_token(&data[t * e..(t + 1) * e], k, normalizer))
            .collect()
    }

    /// Copies this grouter (parameters and frozen state) into another graph.
    pub fn clone_into(&self, src: &Graph, dst: &mut Graph) -> Result<Grouter> {
        let mut rng = rng_from_seed(0);
        let mut out = Grouter::init(dst, self.config.clone(), &mut rng)?;
        for (name, id) in self.params.iter() {
            let data = src.value(id).data().to_vec();
            let dst_id = out.params.get(name).expect("same param names");
            dst.set_data(dst_id, &data)?;
        }
        if self.frozen {
            out.freeze(dst);
        }
        Ok(out)
    }

    /// Applies an expert fold: a new grouter with `E_T` output columns whose
    /// score layer is `W_s M`; every other parameter is copied bit-exact.
    pub fn fold(&self, g: &mut Graph, mapping: &crate::folding::MappingMatrix) -> Result<Grouter> {
        if mapping.source_experts != self.config.num_experts_out {
            return Err(Error::ConfigMismatch(format!(
                "mapping folds {} experts, grouter outputs {}",
                mapping.source_experts, self.config.num_experts_out
            )));
        }
        let mut config = self.config.clone();
        config.num_experts_out = mapping.target_experts;
        let mut rng = rng_from_seed(0);
        let folded = Grouter::init(g, config, &mut rng)?;
        for (name, id) in self.params.iter() {
            let dst = folded.params.get(name).expect("same param names");
            if name == "w_s" {
                let w = g.value(id).data().to_vec();
                let out = crate::folding::fold_weights(&w, self.config.embed_dim, mapping)?;
                g.set_data(dst, &out)?;
            } else {
                let data = g.value(id).data().to_vec();
                g.set_data(dst, &data)?;
            }
        }
        Ok(folded)
    }

    /// Freezes every parameter; routing becomes immutable.
    pub fn freeze(&mut self, g: &mut Graph) {
        for (_, id) in self.params.iter() {
            g.set_frozen(id, true);
        }
        self.frozen = true;
    }

    pub fn to_blobs(&self, g: &Graph) -> Vec<Blob> {
        self.params
            .iter()
            .map(|(name, id)| {
                let t = g.value(id);
                (name.to_string(), t.shape().to_vec(), t.data().to_vec())
            })
            .collect()
    }

    /// Checksum over everything except the score projection, for the
    /// tuning-leaves-the-encoder-untouched contract.
    pub fn encoder_checksum(&self, g: &Graph) -> u64 {
        let blobs: Vec<Blob> = self
            .params
            .iter()
            .filter(|(name, _)| *name != "w_s")
            .map(|(name, id)| {
                let t = g.value(id);
                (name.to_string(), t.shape().to_vec(), t.data().to_vec())
            })
            .collect();
        blobs_checksum(&blobs)
    }

    pub fn from_blobs(
        g: &mut Graph,
        config: GrouterConfig,
        blobs: &[Blob],
        frozen: bool,
    ) -> Result<Self> {
        let mut rng = rng_from_seed(0);
        let mut grouter = Self::init(g, config, &mut rng)?;
        for (name, shape, data) in blobs {
            let id = grouter.params.get(name).ok_or_else(|| Error::Format {
                what: "grouter checkpoint",
                detail: format!("unknown parameter {name}"),
            })?;
            if g.value(id).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load-grouter",
                    lhs: g.value(id).shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            g.set_data(id, data)?;
        }
        if frozen {
            grouter.freeze(g);
        }
        Ok(grouter)
    }

    pub fn save(&self, g: &Graph, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_magic(&mut w, MAGIC, FORMAT_VERSION)?;
        write_u32(&mut w, self.config.vocab_size as u32)?;
        write_u32(&mut w, self.config.embed_dim as u32)?;
        write_u32(&mut w, self.config.num_blocks as u32)?;
        write_u32(&mut w, self.config.num_heads as u32)?;
        write_u32(&mut w, self.config.num_experts_out as u32)?;
        write_u32(&mut w, self.config.use_positions as u32)?;
        write_u32(&mut w, self.config.max_seq_len as u32)?;
        write_u32(&mut w, self.frozen as u32)?;
        write_blobs(&mut w, &self.to_blobs(g))?;
        Ok(())
    }

    pub fn load(g: &mut Graph, path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, MAGIC, "grouter checkpoint")?;
        let config = GrouterConfig {
            vocab_size: read_u32(&mut r)? as usize,
            embed_dim: read_u32(&mut r)? as usize,
            num_blocks: read_u32(&mut r)? as usize,
            num_heads: read_u32(&mut r)? as usize,
            num_experts_out: read_u32(&mut r)? as usize,
            use_positions: read_u32(&mut r)? != 0,
            max_seq_len: read_u32(&mut r)? as usize,
        };
        let frozen = read_u32(&mut r)? != 0;
        let blobs = read_blobs(&mut r, "grouter checkpoint")?;
        Self::from_blobs(g, config, &blobs, frozen)
    }
}

/// Mean KL(teacher || softmax(student_logits)) over token rows; the
/// distillation objective, shared by training and evaluation.
pub fn mean_kl(teacher_probs: &[f64], student_logits: &[f64], experts: usize) -> f64 {
    let n = teacher_probs.len() / experts;
    let mut total = 0.0;
    for t in 0..n {
        let p = &teacher_probs[t * experts..(t + 1) * experts];
        let s = &student_logits[t * experts..(t + 1) * experts];
        let sm = crate::routing::softmax_slice(s);
        for i in 0..experts {
            if p[i] > 0.0 {
                total += p[i] * (p[i].ln() - sm[i].max(1e-300).ln());
            }
        }
    }
    total / n as f64
}

#[derive(Debug, Clone)]
pub struct DistillOptions {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            seed: 0,
            schedule: Schedule::WarmupCosine {
                base_lr: 2e-3,
                warmup: 50,
                total: 1000,
                min_lr: 2e-4,
            },
        }
    }
}

pub struct DistillResult {
    /// (step, batch KL) per step.
    pub loss_log: Vec<(usize, f64)>,
    /// Mean KL over the validation split at the end.
    pub final_valid_kl: f64,
}

/// Distills the source model's first-MoE-layer routing distribution into the
/// grouter. No softmax temperature is applied on either side.
pub fn distill(
    g: &mut Graph,
    source: &MoeModel,
    grouter: &Grouter,
    corpus: &Corpus,
    opts: &DistillOptions,
) -> Result<DistillResult> {
    if source.config.num_experts != grouter.config.num_experts_out {
        return Err(Error::ConfigMismatch(format!(
            "source has {} experts, grouter outputs {}",
            source.config.num_experts, grouter.config.num_experts_out
        )));
    }
    if grouter.frozen {
        return Err(Error::FrozenParameter("grouter (distill after freeze)".into()));
    }
    let e = grouter.config.num_experts_out;
    let mut opt = Optimizer::new(OptimizerKind::adamw_default());
    let mut batch_rng = rng_from_seed(derive_seed(opts.seed, "distill-batches"));
    let mut loss_log = Vec::with_capacity(opts.steps);
    let len = corpus.seq_len - 1;

    for step in 0..opts.steps {
        use rand::Rng;
        let mut tokens = Vec::with_capacity(opts.batch * len);
        for _ in 0..opts.batch {
            let i = batch_rng.random_range(0..corpus.train_len());
            tokens.extend_from_slice(&corpus.train_seq(i)[..len]);
        }
        // teacher probabilities, detached
        let teacher_scores = source.first_layer_router_scores(g, &tokens, opts.batch)?;
        let teacher_sm = g.softmax(teacher_scores)?;
        let teacher: Vec<f64> = g.value(teacher_sm).data().to_vec();

        let student = grouter.forward(g, &tokens, opts.batch)?;
        let kl = g.kl_div_from_logits(&teacher, student)?;
        let loss = g.value(kl).data()[0];
        g.backward(kl)?;
        opt.step(g, &grouter.params, opts.schedule.lr(step))?;
        g.zero_grads();
        g.reset();
        loss_log.push((step + 1, loss));
    }

    // held-out KL
    let final_valid_kl = if corpus.valid_len() > 0 {
        let mut total = 0.0;
        for i in 0..corpus.valid_len() {
            let tokens = corpus.valid_seq(i)[..len].to_vec();
            let teacher_scores = source.first_layer_router_scores(g, &tokens, 1)?;
            let teacher_sm = g.softmax(teacher_scores)?;
            let teacher: Vec<f64> = g.value(teacher_sm).data().to_vec();
            let student = grouter.forward(g, &tokens, 1)?;
            let s: Vec<f64> = g.value(student).data().to_vec();
            total += mean_kl(&teacher, &s, e);
            g.reset();
        }
        total / corpus.valid_len() as f64
    } else {
        f64::NAN
    };

    Ok(DistillResult {
        loss_log,
        final_valid_kl,
    })
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub aux_coeff: f64,
    pub top_k: usize,
    pub normalizer: Normalizer,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            seed: 0,
            lr: 2.0,
            aux_coeff: 0.01,
            top_k: 2,
            normalizer: Normalizer::Softmax,
        }
    }
}

/// Load-balance tuning on a frozen grouter: only the final projection W_s
/// trains, with the auxiliary balance loss as the sole objective.
///
/// Uses plain SGD: its updates are proportional to the balance gradient, so
/// an already-balanced grouter stays where it is instead of random-walking
/// on a flat objective.
pub fn expert_tune(
    g: &mut Graph,
    grouter: &Grouter,
    corpus: &Corpus,
    opts: &TuneOptions,
) -> Result<Vec<(usize, f64)>> {
    if !grouter.frozen {
        return Err(Error::InvalidConfig(
            "expert tuning requires a frozen grouter".into(),
        ));
    }
    // W_s alone becomes trainable for the duration of the pass
    g.set_frozen(grouter.w_s, false);
    let mut ws_only = ParamSet::new();
    ws_only.add("w_s", grouter.w_s);
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    let mut batch_rng = rng_from_seed(derive_seed(opts.seed, "tune-batches"));
    let len = corpus.seq_len - 1;
    let mut log = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        use rand::Rng;
        let mut tokens = Vec::with_capacity(opts.batch * len);
        for _ in 0..opts.batch {
            let i = batch_rng.random_range(0..corpus.train_len());
            tokens.extend_from_slice(&corpus.train_seq(i)[..len]);
        }
        let scores = grouter.forward(g, &tokens, opts.batch)?;
        let (gates, picks) = g.topk_gate(scores, opts.top_k, opts.normalizer)?;
        let decisions = crate::model::decisions_from_picks(g, gates, &picks, opts.top_k);
        let loss = aux_loss(g, scores, &decisions, opts.aux_coeff)?;
        let lv = g.value(loss).data()[0];
        g.backward(loss)?;
        opt.step(g, &ws_only, opts.lr)?;
        g.zero_grads();
        g.reset();
        log.push((step + 1, lv));
    }
    g.set_frozen(grouter.w_s, true);
    Ok(log)
}

/// Mean distillation KL between source routing and grouter routing over
/// (up to `max_seqs`) train sequences.
pub fn measure_mean_kl(
    g: &mut Graph,
    source: &MoeModel,
    grouter: &Grouter,
    corpus: &Corpus,
    max_seqs: usize,
) -> Result<f64> {
    let n = if max_seqs == 0 {
        corpus.train_len()
    } else {
        corpus.train_len().min(max_seqs)
    };
    let e = grouter.config.num_experts_out;
    let len = corpus.seq_len - 1;
    let mut total = 0.0;
    for i in 0..n {
        let tokens = corpus.train_seq(i)[..len].to_vec();
        let teacher_scores = source.first_layer_router_scores(g, &tokens, 1)?;
        let teacher_sm = g.softmax(teacher_scores)?;
        let teacher: Vec<f64> = g.value(teacher_sm).data().to_vec();
        let student = grouter.forward(g, &tokens, 1)?;
        let s: Vec<f64> = g.value(student).data().to_vec();
        total += mean_kl(&teacher, &s, e);
        g.reset();
    }
    Ok(total / n as f64)
}

/// Routing MaxVio of a grouter over (up to `max_seqs`) train sequences.
pub fn measure_maxvio(
    g: &mut Graph,
    grouter: &Grouter,
    corpus: &Corpus,
    max_seqs: usize,
    k: usize,
    normalizer: Normalizer,
) -> Result<f64> {
    let n = if max_seqs == 0 {
        corpus.train_len()
    } else {
        corpus.train_len().min(max_seqs)
    };
    let mut load = crate::routing::ExpertLoad::new(grouter.config.num_experts_out);
    let len = corpus.seq_len - 1;
    for i in 0..n {
        let tokens = corpus.train_seq(i)[..len].to_vec();
        for d in grouter.route_tokens(g, &tokens, 1, k, normalizer)? {
            load.record(&d);
        }
        g.reset();
    }
    crate::routing::maxvio_global(&load)
}

/// A frozen grouter packaged as a self-contained routing provider for
/// target-model training. Inference is pure, so the interior graph is reset
/// after every call.
pub struct FrozenGrouter {
    inner: RefCell<(Graph, Grouter)>,
    k: usize,
    normalizer: Normalizer,
}

impl FrozenGrouter {
    pub fn new(mut g: Graph, mut grouter: Grouter, k: usize, normalizer: Normalizer) -> Result<Self> {
        if k > grouter.config.num_experts_out {
            return Err(Error::IndexOutOfRange {
                what: "top_k",
                index: k,
                bound: grouter.config.num_experts_out,
            });
        }
        if !grouter.frozen {
            grouter.freeze(&mut g);
        }
        g.mark_params_end();
        g.reset();
        Ok(Self {
            inner: RefCell::new((g, grouter)),
            k,
            normalizer,
        })
    }

    pub fn load(path: &Path, k: usize, normalizer: Normalizer) -> Result<Self> {
        let mut g = Graph::new();
        let grouter = Grouter::load(&mut g, path)?;
        Self::new(g, grouter, k, normalizer)
    }

    pub fn num_experts(&self) -> usize {
        self.inner.borrow().1.config.num_experts_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Raw scores for a token batch.
    pub fn scores(&self, tokens: &[u16], batch: usize) -> Result<Vec<f64>> {
        let (g, grouter) = &mut *self.inner.borrow_mut();
        let id = grouter.forward(g, tokens, batch)?;
        let out = g.value(id).data().to_vec();
        g.reset();
        Ok(out)
    }

    pub fn route(&self, tokens: &[u16], batch: usize) -> Result<Vec<RoutingDecision>> {
        let (g, grouter) = &mut *self.inner.borrow_mut();
        let out = grouter.route_tokens(g, tokens, batch, self.k, self.normalizer);
        g.reset();
        out
    }
}

impl RouteProvider for FrozenGrouter {
    fn decisions(
        &self,
        _seq_indices: &[usize],
        tokens: &[u16],
        len: usize,
    ) -> Result<Vec<RoutingDecision>> {
        self.route(tokens, tokens.len() / len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GrouterConfig {
        GrouterConfig {
            vocab_size: 32,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            num_experts_out: 4,
            use_positions: false,
            max_seq_len: 16,
        }
    }

    #[test]
    fn repeated_token_without_positions_scores_identically() {
        let mut g = Graph::new();
        let mut rng = rng_from_seed(1);
        let grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
        let tokens = vec![7u16; 6];
        let s = grouter.forward(&mut g, &tokens, 1).unwrap();
        let data = g.value(s).data();
        let first = &data[..4];
        for t in 1..6 {
            assert_eq!(&data[t * 4..(t + 1) * 4], first);
        }
    }

    #[test]
    fn permutation_without_positions_permutes_scores() {
        let mut g = Graph::new();
        let mut rng = rng_from_seed(2);
        let grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
        g.mark_params_end();
        let a = vec![1u16, 2, 3, 4];
        let b = vec![3u16, 1, 4, 2];
        let sa = grouter.forward(&mut g, &a, 1).unwrap();
        let sa: Vec<f64> = g.value(sa).data().to_vec();
        g.reset();
        let sb = grouter.forward(&mut g, &b, 1).unwrap();
        let sb: Vec<f64> = g.value(sb).data().to_vec();
        // multiset of per-position score vectors is unchanged (up to the
        // summation-order rounding that the permutation itself introduces)
        let sort_rows = |s: &[f64]| {
            let mut rows: Vec<Vec<f64>> =
                (0..4).map(|t| s[t * 4..(t + 1) * 4].to_vec()).collect();
            rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
            rows
        };
        for (ra, rb) in sort_rows(&sa).iter().zip(sort_rows(&sb).iter()) {
            for (va, vb) in ra.iter().zip(rb) {
                assert!((va - vb).abs() < 1e-9, "{va} vs {vb}");
            }
        }
    }

    #[test]
    fn forward_rejects_empty_input() {
        let mut g = Graph::new();
        let mut rng = rng_from_seed(3);
        let grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
        assert!(grouter.forward(&mut g, &[], 1).is_err());
    }

    #[test]
    fn forward_is_bitwise_stable() {
        let run = || {
            let mut g = Graph::new();
            let mut rng = rng_from_seed(4);
            let grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
            let s = grouter.forward(&mut g, &[5, 9, 2], 1).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kl_of_own_scores_is_zero() {
        let mut g = Graph::new();
        let mut rng = rng_from_seed(5);
        let grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
        let s = grouter.forward(&mut g, &[1, 2, 3], 1).unwrap();
        let logits = g.value(s).data().to_vec();
        let probs: Vec<f64> = (0..3)
            .flat_map(|t| crate::routing::softmax_slice(&logits[t * 4..(t + 1) * 4]))
            .collect();
        assert!(mean_kl(&probs, &logits, 4).abs() < 1e-14);
        // and strictly positive as soon as the distributions differ
        let mut shifted = logits.clone();
        shifted[0] += 0.5;
        assert!(mean_kl(&probs, &shifted, 4) > 1e-4);
    }

    #[test]
    fn frozen_grouter_is_immutable_and_repeatable() {
        let mut g = Graph::new();
        let mut rng = rng_from_seed(6);
        let mut grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
        grouter.freeze(&mut g);
        let mut ws = ParamSet::new();
        ws.add("w_s", grouter.w_s);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        assert!(matches!(
            opt.step(&mut g, &ws, 0.1),
            Err(Error::FrozenParameter(_))
        ));
        let fz = FrozenGrouter::new(g, grouter, 2, Normalizer::Softmax).unwrap();
        let a = fz.route(&[1, 2, 3, 4], 1).unwrap();
        let b = fz.route(&[1, 2, 3, 4], 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grouter.ckpt");
        let tokens = vec![3u16, 1, 4, 1, 5];
        let before = {
            let mut g = Graph::new();
            let mut rng = rng_from_seed(7);
            let mut grouter = Grouter::init(&mut g, tiny_config(), &mut rng).unwrap();
            grouter.freeze(&mut g);
            grouter.save(&g, &path).unwrap();
            let s = grouter.forward(&mut g, &tokens, 1).unwrap();
            g.value(s).data().to_vec()
        };
        let mut g = Graph::new();
        let grouter = Grouter::load(&mut g, &path).unwrap();
        assert!(grouter.frozen);
        let s = grouter.forward(&mut g, &tokens, 1).unwrap();
        assert_eq!(before, g.value(s).data());
    }
}
