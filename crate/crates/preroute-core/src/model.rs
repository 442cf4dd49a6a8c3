//! Decoder-only MoE transformer: every block is multi-head causal attention
//! followed by a top-k routed mixture of gated FFN experts.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::optim::ParamSet;
use crate::rng::fill_normal;
use crate::routing::{Normalizer, RoutingDecision};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MoeConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub seq_len: usize,
    pub normalizer: Normalizer,
}

impl MoeConfig {
    /// Desk-scale default; production MoE configs are far larger.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: 256,
            hidden: 32,
            num_layers: 2,
            num_heads: 4,
            num_experts: 16,
            top_k: 2,
            expert_hidden: 64,
            seq_len: 64,
            normalizer: Normalizer::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= k <= E, got k={} E={}",
                self.top_k, self.num_experts
            )));
        }
        if self.num_experts > 65536 {
            return Err(Error::InvalidConfig(format!(
                "E={} exceeds 65536",
                self.num_experts
            )));
        }
        if self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.seq_len < 2 || self.num_layers == 0 {
            return Err(Error::InvalidConfig("degenerate model dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertIds {
    pub gate: TensorId,
    pub up: TensorId,
    pub down: TensorId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    norm1: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    norm2: TensorId,
    router: TensorId,
    experts: Vec<ExpertIds>,
}

/// Where routing decisions come from during a forward pass.
pub enum RouteSource<'a> {
    /// Per-layer learned router (gradients flow into the router weights).
    Learned,
    /// One externally supplied decision per token, shared by every layer.
    External(&'a [RoutingDecision]),
    /// Balanced hash table: token id -> single expert, unit weight.
    Hash(&'a [u16]),
}

pub struct ForwardPass {
    pub logits: TensorId,
    /// Router logits per layer (learned mode only).
    pub layer_scores: Vec<Option<TensorId>>,
    /// Decisions actually used, per layer.
    pub layer_decisions: Vec<Vec<RoutingDecision>>,
}

pub struct MoeModel {
    pub config: MoeConfig,
    tok_embed: TensorId,
    pos_embed: TensorId,
    layers: Vec<LayerIds>,
    final_norm: TensorId,
    lm_head: TensorId,
    /// All trainable parameters.
    pub params: ParamSet,
    /// The per-layer router matrices only.
    pub router_params: ParamSet,
    /// Expert FFN parameters only.
    pub expert_params: ParamSet,
}

fn normal_param(g: &mut Graph, rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> TensorId {
    let mut t = Tensor::zeros(shape);
    fill_normal(rng, std, t.data_mut());
    g.param(t)
}

fn ones_param(g: &mut Graph, shape: Vec<usize>) -> TensorId {
    let numel = shape.iter().product();
    g.param(Tensor::new(shape, vec![1.0; numel]).unwrap())
}

impl MoeModel {
    pub fn init(g: &mut Graph, config: MoeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let eh = config.expert_hidden;
        let e = config.num_experts;
        let dstd = 1.0 / (d as f64).sqrt();
        let estd = 1.0 / (eh as f64).sqrt();

        let mut params = ParamSet::new();
        let mut router_params = ParamSet::new();
        let mut expert_params = ParamSet::new();

        let tok_embed = normal_param(g, rng, vec![config.vocab_size, d], 0.02);
        params.add("tok_embed", tok_embed);
        let pos_embed = normal_param(g, rng, vec![config.seq_len, d], 0.02);
        params.add("pos_embed", pos_embed);

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let norm1 = ones_param(g, vec![d]);
            params.add(format!("layer{l}.norm1"), norm1);
            let wq = normal_param(g, rng, vec![d, d], dstd);
            params.add(format!("layer{l}.wq"), wq);
            let wk = normal_param(g, rng, vec![d, d], dstd);
            params.add(format!("layer{l}.wk"), wk);
            let wv = normal_param(g, rng, vec![d, d], dstd);
            params.add(format!("layer{l}.wv"), wv);
            let wo = normal_param(g, rng, vec![d, d], dstd);
            params.add(format!("layer{l}.wo"), wo);
            let norm2 = ones_param(g, vec![d]);
            params.add(format!("layer{l}.norm2"), norm2);
            let router = normal_param(g, rng, vec![d, e], dstd);
            params.add(format!("layer{l}.router"), router);
            router_params.add(format!("layer{l}.router"), router);
            let mut experts = Vec::with_capacity(e);
            for x in 0..e {
                let gate = normal_param(g, rng, vec![d, eh], dstd);
                let up = normal_param(g, rng, vec![d, eh], dstd);
                let down = normal_param(g, rng, vec![eh, d], estd);
                params.add(format!("layer{l}.expert{x}.gate"), gate);
                params.add(format!("layer{l}.expert{x}.up"), up);
                params.add(format!("layer{l}.expert{x}.down"), down);
                expert_params.add(format!("layer{l}.expert{x}.gate"), gate);
                expert_params.add(format!("layer{l}.expert{x}.up"), up);
                expert_params.add(format!("layer{l}.expert{x}.down"), down);
                experts.push(ExpertIds { gate, up, down });
            }
            layers.push(LayerIds {
                norm1,
                wq,
                wk,
                wv,
                wo,
                norm2,
                router,
                experts,
            });
        }
        let final_norm = ones_param(g, vec![d]);
        params.add("final_norm", final_norm);
        let lm_head = normal_param(g, rng, vec![d, config.vocab_size], dstd);
        params.add("lm_head", lm_head);

        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            lm_head,
            params,
            router_params,
            expert_params,
        })
    }

    /// Snapshot of all parameters as named blobs.
    pub fn to_blobs(&self, g: &Graph) -> Vec<crate::checkpoint::Blob> {
        self.params
            .iter()
            .map(|(name, id)| {
                let t = g.value(id);
                (name.to_string(), t.shape().to_vec(), t.data().to_vec())
            })
            .collect()
    }

    /// Rebuilds a model from config + blobs, registering fresh parameters.
    pub fn from_blobs(
        g: &mut Graph,
        config: MoeConfig,
        blobs: &[crate::checkpoint::Blob],
    ) -> Result<Self> {
        let mut rng = crate::rng::rng_from_seed(0);
        let model = Self::init(g, config, &mut rng)?;
        for (name, shape, data) in blobs {
            let id = model.params.get(name).ok_or_else(|| Error::Format {
                what: "model checkpoint",
                detail: format!("unknown parameter {name}"),
            })?;
            if g.value(id).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load-checkpoint",
                    lhs: g.value(id).shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            g.set_data(id, data)?;
        }
        Ok(model)
    }

    /// Runs only up to the first MoE layer's router and returns its raw
    /// scores `[tokens, E]` — the distillation teacher signal.
    pub fn first_layer_router_scores(
        &self,
        g: &mut Graph,
        tokens: &[u16],
        batch: usize,
    ) -> Result<TensorId> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward-batch",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let len = tokens.len() / batch;
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.embed(self.tok_embed, &ids)?;
        let positions: Vec<usize> = (0..n).map(|i| i % len).collect();
        let pos = g.embed(self.pos_embed, &positions)?;
        let mut x = g.add(tok, pos)?;
        let layer = &self.layers[0];
        let xn = g.rms_norm(x, layer.norm1, 1e-6)?;
        let q = g.matmul(xn, layer.wq)?;
        let k = g.matmul(xn, layer.wk)?;
        let v = g.matmul(xn, layer.wv)?;
        let dh = self.config.hidden / self.config.num_heads;
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
                heads.push(g.attn_head(qh, kh, vh, true)?);
            }
            seq_outs.push(g.concat_cols(&heads)?);
        }
        let attn = g.concat_rows(&seq_outs)?;
        let attn_out = g.matmul(attn, layer.wo)?;
        x = g.add(x, attn_out)?;
        let h = g.rms_norm(x, layer.norm2, 1e-6)?;
        g.matmul(h, layer.router)
    }

    /// Forward pass over `batch` sequences of equal length; returns logits
    /// `[batch*len, vocab]` plus the routing record.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[u16],
        batch: usize,
        route: &RouteSource,
    ) -> Result<ForwardPass> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward-batch",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let len = tokens.len() / batch;
        if len > self.config.seq_len {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: len,
                bound: self.config.seq_len,
            });
        }
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.embed(self.tok_embed, &ids)?;
        let positions: Vec<usize> = (0..n).map(|i| i % len).collect();
        let pos = g.embed(self.pos_embed, &positions)?;
        let mut x = g.add(tok, pos)?;

        if let RouteSource::External(decisions) = route {
            if decisions.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "external-decisions",
                    lhs: vec![n],
                    rhs: vec![decisions.len()],
                });
            }
        }

        let mut layer_scores = Vec::with_capacity(self.layers.len());
        let mut layer_decisions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // attention sublayer
            let xn = g.rms_norm(x, layer.norm1, 1e-6)?;
            let q = g.matmul(xn, layer.wq)?;
            let k = g.matmul(xn, layer.wk)?;
            let v = g.matmul(xn, layer.wv)?;
            let dh = self.config.hidden / self.config.num_heads;
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
                    heads.push(g.attn_head(qh, kh, vh, true)?);
                }
                seq_outs.push(g.concat_cols(&heads)?);
            }
            let attn = g.concat_rows(&seq_outs)?;
            let attn_out = g.matmul(attn, layer.wo)?;
            x = g.add(x, attn_out)?;

            // MoE FFN sublayer
            let xn = g.rms_norm(x, layer.norm2, 1e-6)?;
            let (scores, decisions, gates) = match route {
                RouteSource::Learned => {
                    let scores = g.matmul(xn, layer.router)?;
                    let (gates, picks) =
                        g.topk_gate(scores, self.config.top_k, self.config.normalizer)?;
                    let decisions =
                        decisions_from_picks(g, gates, &picks, self.config.top_k);
                    (Some(scores), decisions, gates)
                }
                RouteSource::External(decisions) => {
                    let k = self.config.top_k;
                    let mut w = Vec::with_capacity(n * k);
                    for d in decisions.iter() {
                        if d.k() != k {
                            return Err(Error::ConfigMismatch(format!(
                                "external decision has k={}, model expects {}",
                                d.k(),
                                k
                            )));
                        }
                        w.extend_from_slice(&d.weights);
                    }
                    let gates = g.constant(Tensor::new(vec![n, k], w)?);
                    (None, decisions.to_vec(), gates)
                }
                RouteSource::Hash(table) => {
                    let mut decisions = Vec::with_capacity(n);
                    for &t in tokens {
                        let e = *table.get(t as usize).ok_or(Error::IndexOutOfRange {
                            what: "hash table token",
                            index: t as usize,
                            bound: table.len(),
                        })?;
                        decisions.push(RoutingDecision {
                            experts: vec![e],
                            weights: vec![1.0],
                        });
                    }
                    let gates = g.constant(Tensor::new(vec![n, 1], vec![1.0; n])?);
                    (None, decisions, gates)
                }
            };
            let y = moe_dispatch(
                g,
                xn,
                self.config.num_experts,
                &decisions,
                gates,
                |g, e, xe| {
                    let ex = &layer.experts[e];
                    let h = g.matmul(xe, ex.gate)?;
                    let hs = g.silu(h)?;
                    let u = g.matmul(xe, ex.up)?;
                    let prod = g.mul(hs, u)?;
                    g.matmul(prod, ex.down)
                },
            )?;
            x = g.add(x, y)?;
            layer_scores.push(scores);
            layer_decisions.push(decisions);
        }

        let xn = g.rms_norm(x, self.final_norm, 1e-6)?;
        let logits = g.matmul(xn, self.lm_head)?;
        Ok(ForwardPass {
            logits,
            layer_scores,
            layer_decisions,
        })
    }
}

/// Reads gate weights out of the graph to pair with the pick indices.
pub fn decisions_from_picks(
    g: &Graph,
    gates: TensorId,
    picks: &[usize],
    k: usize,
) -> Vec<RoutingDecision> {
    let w = g.value(gates).data();
    let n = picks.len() / k;
    (0..n)
        .map(|t| RoutingDecision {
            experts: picks[t * k..(t + 1) * k].iter().map(|&i| i as u16).collect(),
            weights: w[t * k..(t + 1) * k].to_vec(),
        })
        .collect()
}

/// The MoE combine: `y[t] = sum_{i in selected(t)} gate_{t,i} * f_i(x[t])`.
///
/// Unselected experts see no tokens, so they contribute nothing and receive
/// no gradient. `expert_fn` maps (graph, expert index, gathered rows) to that
/// expert's output rows.
pub fn moe_dispatch<F>(
    g: &mut Graph,
    x: TensorId,
    num_experts: usize,
    decisions: &[RoutingDecision],
    gates: TensorId,
    mut expert_fn: F,
) -> Result<TensorId>
where
    F: FnMut(&mut Graph, usize, TensorId) -> Result<TensorId>,
{
    let n = g.value(x).rows();
    if decisions.len() != n {
        return Err(Error::ShapeMismatch {
            op: "moe-dispatch",
            lhs: vec![n],
            rhs: vec![decisions.len()],
        });
    }
    for d in decisions {
        for &e in &d.experts {
            if e as usize >= num_experts {
                return Err(Error::IndexOutOfRange {
                    what: "expert index",
                    index: e as usize,
                    bound: num_experts,
                });
            }
        }
    }
    let mut parts = Vec::new();
    for e in 0..num_experts {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (t, d) in decisions.iter().enumerate() {
            for (s, &de) in d.experts.iter().enumerate() {
                if de as usize == e {
                    rows.push(t);
                    slots.push((t, s));
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &rows)?;
        let ye = expert_fn(g, e, xe)?;
        let ge = g.gather_gate(gates, &slots)?;
        let yw = g.row_scale(ye, ge)?;
        parts.push(g.scatter_rows(yw, &rows, n)?);
    }
    if parts.is_empty() {
        // no token selected any expert; only possible with empty input
        let d = g.value(x).cols();
        return Ok(g.constant(Tensor::zeros(vec![n, d])));
    }
    g.add_n(&parts)
}
