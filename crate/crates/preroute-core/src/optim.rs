//! Parameter registry and gradient-descent optimizers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};

/// Named trainable parameters of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, TensorId)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, id: TensorId) {
        self.entries.push((name.into(), id));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn get(&self, name: &str) -> Option<TensorId> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total L2 norm over the gradients of these parameters; absent
    /// gradients count as zero.
    pub fn grad_norm(&self, g: &Graph) -> f64 {
        let mut sq = 0.0;
        for (_, id) in &self.entries {
            if let Some(grad) = g.grad(*id) {
                sq += grad.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Plain SGD or AdamW with decoupled weight decay.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: HashMap<usize, Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: HashMap::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters without a gradient buffer are left untouched.
    pub fn step(&mut self, g: &mut Graph, params: &ParamSet, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidValue("learning rate", format!("{lr}")));
        }
        for (name, id) in params.iter() {
            if g.is_frozen(id) {
                return Err(Error::FrozenParameter(name.to_string()));
            }
            let grad = match g.grad(id) {
                Some(gr) => gr.to_vec(),
                None => continue,
            };
            if grad.iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient(name.to_string()));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let data = g.data_mut(id);
                    for (p, gr) in data.iter_mut().zip(&grad) {
                        *p -= lr * gr;
                    }
                }
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let t = (self.step + 1) as f64;
                    let st = self.state.entry(id.index()).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let data = g.data_mut(id);
                    for i in 0..grad.len() {
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * data[i]);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Learning-rate schedules supported by the training loops.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub enum Schedule {
    Constant { lr: f64 },
    WarmupCosine { base_lr: f64, warmup: usize, total: usize, min_lr: f64 },
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::WarmupCosine {
                base_lr,
                warmup,
                total,
                min_lr,
            } => {
                if warmup > 0 && step < warmup {
                    base_lr * (step + 1) as f64 / warmup as f64
                } else if step >= total {
                    min_lr
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let frac = (step - warmup) as f64 / span;
                    min_lr
                        + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}
