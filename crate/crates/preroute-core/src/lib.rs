//! Desk-scale laboratory for preemptive MoE routing: a small autodiff
//! engine, a toy MoE language model, router distillation with expert
//! folding and tuning, offline routing caches, expert-parallel placement
//! planning, a communication simulator, and training diagnostics.

pub mod cache;
pub mod checkpoint;
pub mod cluster;
pub mod corpus;
pub mod diagnostics;
pub mod ep;
pub mod error;
pub mod folding;
pub mod comm;
pub mod graph;
pub mod grouter;
pub mod hungarian;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;
