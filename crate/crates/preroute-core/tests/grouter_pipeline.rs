//! Source pretraining -> distillation -> freeze -> expert tuning, at desk
//! scale, with the convergence and rebalancing contracts checked end to end.

mod common;

use preroute_core::corpus::{generate, CorpusSpec};
use preroute_core::graph::Graph;
use preroute_core::grouter::{
    distill, expert_tune, measure_maxvio, measure_mean_kl, DistillOptions, Grouter, GrouterConfig,
    TuneOptions,
};
use preroute_core::model::{MoeConfig, MoeModel};
use preroute_core::optim::{OptimizerKind, Schedule};
use preroute_core::routing::Normalizer;
use preroute_core::train::{train_lm, TrainOptions, TrainRouterMode};

fn source_config() -> MoeConfig {
    MoeConfig {
        vocab_size: 128,
        hidden: 32,
        num_layers: 2,
        num_heads: 4,
        num_experts: 16,
        top_k: 2,
        expert_hidden: 32,
        seq_len: 32,
        normalizer: Normalizer::Softmax,
    }
}

fn balanced_corpus() -> CorpusSpec {
    CorpusSpec {
        vocab_size: 128,
        domains: 8,
        seq_len: 33,
        train_sequences: 400,
        valid_sequences: 32,
        skew: 1.0,
        seed: 301,
    }
}

fn train_source(corpus: &preroute_core::corpus::Corpus) -> preroute_core::train::TrainResult {
    let src_opts = TrainOptions {
        steps: 500,
        batch: 8,
        seed: 17,
        optimizer: OptimizerKind::adamw_default(),
        schedule: Schedule::Constant { lr: 1.5e-3 },
        aux_coeff: 0.01,
        z_coeff: 0.001,
        checkpoint_every: 0,
        valid_cap: 16,
    };
    train_lm(&source_config(), corpus, &TrainRouterMode::Learned, &src_opts).unwrap()
}

#[test]
fn distill_converges_and_tuning_rebalances() {
    let corpus = generate(&balanced_corpus()).unwrap();

    // 1. source model trained to a reasonably converged routing
    let src = train_source(&corpus);
    assert!(src.diverged_at.is_none());
    println!(
        "source: train loss {:.3} -> {:.3}, valid {:.3}",
        src.metric_log[0].loss,
        src.metric_log.last().unwrap().loss,
        src.final_valid_loss
    );

    // 2. distill the first-layer routing into a fresh grouter
    let mut g = Graph::new();
    let source = MoeModel::from_blobs(
        &mut g,
        source_config(),
        &src.checkpoints.last().unwrap().blobs,
    )
    .unwrap();
    let mut rng = preroute_core::rng::rng_from_seed(23);
    let gcfg = GrouterConfig {
        vocab_size: 128,
        embed_dim: 32,
        num_blocks: 2,
        num_heads: 4,
        num_experts_out: 16,
        use_positions: true,
        max_seq_len: 32,
    };
    let grouter = Grouter::init(&mut g, gcfg, &mut rng).unwrap();
    g.mark_params_end();
    let dopts = DistillOptions {
        steps: 2000,
        batch: 8,
        seed: 29,
        schedule: Schedule::WarmupCosine {
            base_lr: 2e-3,
            warmup: 60,
            total: 2000,
            min_lr: 1e-4,
        },
    };
    let dres = distill(&mut g, &source, &grouter, &corpus, &dopts).unwrap();
    let corpus_kl = measure_mean_kl(&mut g, &source, &grouter, &corpus, 200).unwrap();
    println!(
        "distill: first KL {:.4}, last KL {:.4}, corpus KL {:.4}, held-out KL {:.4}",
        dres.loss_log[0].1,
        dres.loss_log.last().unwrap().1,
        corpus_kl,
        dres.final_valid_kl
    );
    assert!(
        corpus_kl < 0.05,
        "distillation did not converge: corpus mean KL {corpus_kl}"
    );
    // smoothed loss decreases from start to finish
    let head: f64 = dres.loss_log[..50].iter().map(|(_, l)| l).sum::<f64>() / 50.0;
    let tail: f64 = dres.loss_log[dres.loss_log.len() - 50..]
        .iter()
        .map(|(_, l)| l)
        .sum::<f64>()
        / 50.0;
    assert!(tail < head, "distill loss should fall: {head} -> {tail}");

    // 3. freeze; encoder checksum must survive tuning
    let mut grouter = grouter;
    grouter.freeze(&mut g);
    let encoder_before = grouter.encoder_checksum(&g);

    // 4. the x8-skewed target distribution imbalances the raw grouter
    let mut skewed_spec = balanced_corpus();
    skewed_spec.skew = 8.0;
    skewed_spec.seed = 302;
    skewed_spec.train_sequences = 600;
    let skewed = generate(&skewed_spec).unwrap();
    let pre = measure_maxvio(&mut g, &grouter, &skewed, 200, 2, Normalizer::Softmax).unwrap();
    println!("pre-tune MaxVio on skewed target: {pre:.3}");
    assert!(pre > 1.0, "expected raw grouter imbalance > 1.0, got {pre}");

    // 5. tuning only W_s restores balance
    let topts = TuneOptions {
        steps: 500,
        batch: 8,
        seed: 31,
        lr: 2.0,
        aux_coeff: 0.01,
        top_k: 2,
        normalizer: Normalizer::Softmax,
    };
    let log = expert_tune(&mut g, &grouter, &skewed, &topts).unwrap();
    let post = measure_maxvio(&mut g, &grouter, &skewed, 200, 2, Normalizer::Softmax).unwrap();
    println!(
        "post-tune MaxVio: {post:.3} (aux loss {:.5} -> {:.5})",
        log[0].1,
        log.last().unwrap().1
    );
    assert!(post < 0.3, "tuning should rebalance below 0.3, got {post}");
    assert_eq!(
        grouter.encoder_checksum(&g),
        encoder_before,
        "tuning must not touch encoder/embedding parameters"
    );

    // 6. steps=0 tuning leaves W_s unchanged
    let ws_before = g.value(grouter.score_layer()).data().to_vec();
    let topts0 = TuneOptions { steps: 0, ..topts };
    expert_tune(&mut g, &grouter, &skewed, &topts0).unwrap();
    assert_eq!(ws_before, g.value(grouter.score_layer()).data());
}

/// The convergence contract at its smallest: a 32-sequence corpus is
/// memorized to mean KL < 0.05 within the 3000-step budget.
#[test]
fn distill_memorizes_small_corpus() {
    let spec = CorpusSpec {
        vocab_size: 64,
        domains: 2,
        seq_len: 17,
        train_sequences: 32,
        valid_sequences: 4,
        skew: 1.0,
        seed: 71,
    };
    let corpus = generate(&spec).unwrap();
    let cfg = MoeConfig {
        vocab_size: 64,
        hidden: 16,
        num_layers: 1,
        num_heads: 2,
        num_experts: 4,
        top_k: 2,
        expert_hidden: 24,
        seq_len: 16,
        normalizer: Normalizer::Softmax,
    };
    let opts = TrainOptions {
        steps: 200,
        batch: 8,
        seed: 73,
        optimizer: OptimizerKind::adamw_default(),
        schedule: Schedule::Constant { lr: 1.5e-3 },
        aux_coeff: 0.01,
        z_coeff: 0.0,
        checkpoint_every: 0,
        valid_cap: 4,
    };
    let src = train_lm(&cfg, &corpus, &TrainRouterMode::Learned, &opts).unwrap();

    let mut g = Graph::new();
    let source = MoeModel::from_blobs(&mut g, cfg, &src.checkpoints.last().unwrap().blobs).unwrap();
    let mut rng = preroute_core::rng::rng_from_seed(79);
    let gcfg = GrouterConfig {
        vocab_size: 64,
        embed_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        num_experts_out: 4,
        use_positions: true,
        max_seq_len: 16,
    };
    let grouter = Grouter::init(&mut g, gcfg, &mut rng).unwrap();
    g.mark_params_end();
    let dopts = DistillOptions {
        steps: 3000,
        batch: 8,
        seed: 83,
        schedule: Schedule::WarmupCosine {
            base_lr: 2e-3,
            warmup: 100,
            total: 3000,
            min_lr: 1e-4,
        },
    };
    distill(&mut g, &source, &grouter, &corpus, &dopts).unwrap();
    let kl = measure_mean_kl(&mut g, &source, &grouter, &corpus, 0).unwrap();
    println!("32-sequence distill: final mean KL {kl:.5}");
    assert!(kl < 0.05, "expected mean KL < 0.05, got {kl}");
}

#[test]
fn zero_lr_distill_step_leaves_parameters_unchanged() {
    let corpus = generate(&CorpusSpec {
        vocab_size: 64,
        domains: 2,
        seq_len: 17,
        train_sequences: 16,
        valid_sequences: 2,
        skew: 1.0,
        seed: 99,
    })
    .unwrap();
    let cfg = MoeConfig {
        vocab_size: 64,
        hidden: 16,
        num_layers: 1,
        num_heads: 2,
        num_experts: 4,
        top_k: 2,
        expert_hidden: 16,
        seq_len: 16,
        normalizer: Normalizer::Softmax,
    };
    let mut g = Graph::new();
    let mut rng = preroute_core::rng::rng_from_seed(98);
    let source = MoeModel::init(&mut g, cfg, &mut rng).unwrap();
    let grouter = Grouter::init(
        &mut g,
        GrouterConfig {
            vocab_size: 64,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            num_experts_out: 4,
            use_positions: true,
            max_seq_len: 16,
        },
        &mut rng,
    )
    .unwrap();
    g.mark_params_end();
    let before: Vec<Vec<f64>> = grouter
        .params
        .iter()
        .map(|(_, id)| g.value(id).data().to_vec())
        .collect();
    distill(
        &mut g,
        &source,
        &grouter,
        &corpus,
        &DistillOptions {
            steps: 1,
            batch: 2,
            seed: 97,
            schedule: Schedule::Constant { lr: 0.0 },
        },
    )
    .unwrap();
    let after: Vec<Vec<f64>> = grouter
        .params
        .iter()
        .map(|(_, id)| g.value(id).data().to_vec())
        .collect();
    assert_eq!(before, after, "a zero-lr step must not move any parameter");
}

#[test]
fn tune_on_matching_distribution_is_a_noop_within_noise() {
    // distillation distribution == target distribution: tuning moves MaxVio
    // by less than 0.05
    let corpus = generate(&balanced_corpus()).unwrap();
    let mut g = Graph::new();
    let mut rng = preroute_core::rng::rng_from_seed(41);
    let gcfg = GrouterConfig {
        vocab_size: 128,
        embed_dim: 32,
        num_blocks: 1,
        num_heads: 2,
        num_experts_out: 8,
        use_positions: true,
        max_seq_len: 32,
    };
    let mut grouter = Grouter::init(&mut g, gcfg, &mut rng).unwrap();
    g.mark_params_end();
    // balance the grouter on this distribution first, mimicking a
    // distillation target that was already balanced here
    grouter.freeze(&mut g);
    let topts = TuneOptions {
        steps: 400,
        batch: 8,
        seed: 43,
        lr: 2.0,
        aux_coeff: 0.01,
        top_k: 2,
        normalizer: Normalizer::Softmax,
    };
    expert_tune(&mut g, &grouter, &corpus, &topts).unwrap();
    let pre = measure_maxvio(&mut g, &grouter, &corpus, 200, 2, Normalizer::Softmax).unwrap();
    // tune again on the same distribution
    let topts2 = TuneOptions { seed: 44, steps: 200, ..topts };
    expert_tune(&mut g, &grouter, &corpus, &topts2).unwrap();
    let post = measure_maxvio(&mut g, &grouter, &corpus, 200, 2, Normalizer::Softmax).unwrap();
    println!("matched-distribution tuning: MaxVio {pre:.3} -> {post:.3}");
    assert!(
        (post - pre).abs() < 0.05,
        "retuning on the same distribution should be a no-op: {pre} -> {post}"
    );
}
