//! End-to-end training behaviour of the toy MoE language model.

mod common;

use preroute_core::corpus::Corpus;
use preroute_core::model::MoeConfig;
use preroute_core::optim::{OptimizerKind, Schedule};
use preroute_core::routing::Normalizer;
use preroute_core::train::{train_lm, TrainOptions, TrainRouterMode};
use rand::Rng;

/// One fixed pseudo-random sequence: contexts are unambiguous, so the model
/// can drive the loss toward zero by memorizing it.
fn memorizable_corpus(tokens: usize, vocab: usize, seed: u64) -> Corpus {
    let mut rng = preroute_core::rng::rng_from_seed(seed);
    let seq: Vec<u16> = (0..tokens + 1)
        .map(|_| rng.random_range(0..vocab) as u16)
        .collect();
    Corpus {
        vocab_size: vocab,
        seq_len: tokens + 1,
        domains: 1,
        train: seq.clone(),
        valid: seq,
        train_domain: vec![0],
        valid_domain: vec![0],
    }
}

#[test]
fn memorizes_64_token_corpus_under_2000_steps() {
    let corpus = memorizable_corpus(64, 32, 2024);
    let config = MoeConfig {
        vocab_size: 32,
        hidden: 32,
        num_layers: 1,
        num_heads: 2,
        num_experts: 4,
        top_k: 2,
        expert_hidden: 32,
        seq_len: 64,
        normalizer: Normalizer::Softmax,
    };
    let opts = TrainOptions {
        steps: 2000,
        batch: 1,
        seed: 5,
        optimizer: OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        schedule: Schedule::Constant { lr: 3e-3 },
        aux_coeff: 0.0,
        z_coeff: 0.0,
        checkpoint_every: 0,
        valid_cap: 0,
    };
    let r = train_lm(&config, &corpus, &TrainRouterMode::Learned, &opts).unwrap();
    assert!(r.diverged_at.is_none());
    let final_loss = r.metric_log.last().unwrap().loss;
    assert!(
        final_loss < 0.1,
        "expected memorization below 0.1, got {final_loss}"
    );
    // it should not need the whole budget; record how fast it got there
    let first_below = r
        .metric_log
        .iter()
        .find(|m| m.loss < 0.1)
        .map(|m| m.step)
        .unwrap();
    println!("memorization reached loss<0.1 at step {first_below}");
}
