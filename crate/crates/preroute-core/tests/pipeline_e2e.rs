//! Full pipeline plumbing at micro scale: every stage in order, artifact
//! determinism, provenance checking, and replay-vs-live routing parity.

mod common;

use preroute_core::cache::{CacheProvider, RouteCache};
use preroute_core::corpus::CorpusSpec;
use preroute_core::grouter::FrozenGrouter;
use preroute_core::pipeline::*;
use preroute_core::train::{train_lm, TrainOptions, TrainRouterMode};

fn micro_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::nano(seed);
    cfg.corpus = CorpusSpec {
        vocab_size: 128,
        domains: 8,
        seq_len: 33,
        train_sequences: 400,
        valid_sequences: 16,
        skew: 1.0,
        seed,
    };
    cfg.budgets = Budgets {
        source_tokens: 120 * 8 * 32,
        distill_tokens: 250 * 8 * 32,
        tune_tokens: 60 * 8 * 32,
        target_tokens: 100 * 16 * 32,
    };
    cfg.checkpoint_every = 40;
    cfg
}

fn run_all_stages(run: &RunDir, cfg: &ExperimentConfig) {
    stage_corpus(run, cfg).unwrap();
    stage_pretrain_source(run, cfg).unwrap();
    stage_distill(run, cfg).unwrap();
    stage_fold(run, cfg).unwrap();
    stage_tune(run, cfg).unwrap();
    stage_cache(run, cfg).unwrap();
    stage_plan(run, cfg).unwrap();
    stage_simulate(run, cfg).unwrap();
    stage_train_target(run, cfg, "grouter").unwrap();
    stage_train_target(run, cfg, "aux").unwrap();
    stage_diagnose(run, cfg).unwrap();
    stage_report(run, cfg).unwrap();
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let cfg = micro_config(91);
    let start = std::time::Instant::now();
    run_all_stages(&run, &cfg);
    let elapsed = start.elapsed();
    println!("micro pipeline wall time: {:.1}s", elapsed.as_secs_f64());
    assert!(
        elapsed.as_secs() < 1800,
        "the end-to-end pipeline must fit the laptop budget"
    );

    for name in [
        "config.resolved.txt",
        "corpus.bin",
        "source.ckpt",
        "source_metrics.csv",
        "grouter_raw.ckpt",
        "grouter_folded.ckpt",
        "grouter.ckpt",
        "mapping.tsv",
        "route.cache",
        "plan.json",
        "comm.json",
        "target_grouter.ckpt",
        "metrics_grouter.csv",
        "metrics_aux.csv",
        "diagnostics.json",
        "report.json",
        "report.csv",
        "manifest.tsv",
    ] {
        assert!(run.path(name).exists(), "missing artifact {name}");
    }

    // the report's scatter has quadrant labels consistent with its medians
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.path("report.json")).unwrap()).unwrap();
    let med_loss = report["scatter_medians"]["valid_loss"].as_f64().unwrap();
    let med_vio = report["scatter_medians"]["maxvio"].as_f64().unwrap();
    for point in report["maxvio_scatter"].as_array().unwrap() {
        let loss = point["valid_loss"].as_f64().unwrap();
        let vio = point["maxvio"].as_f64().unwrap();
        let expect = match (loss <= med_loss, vio <= med_vio) {
            (true, true) => "low-loss/low-vio",
            (true, false) => "low-loss/high-vio",
            (false, true) => "high-loss/low-vio",
            (false, false) => "high-loss/high-vio",
        };
        assert_eq!(point["quadrant"].as_str().unwrap(), expect);
    }

    // frozen-arm manifest stats: router gradients identically zero
    let router_csv = std::fs::read_to_string(run.path("router_grad_grouter.csv")).unwrap();
    for line in router_csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "frozen run must never write router gradients");
    }
}

#[test]
fn stage_reruns_reproduce_identical_artifact_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let mut cfg = micro_config(92);
    cfg.budgets.source_tokens = 60 * 8 * 32;
    cfg.budgets.distill_tokens = 60 * 8 * 32;
    stage_corpus(&run, &cfg).unwrap();
    let corpus_hash = run.file_hash("corpus.bin").unwrap();
    stage_pretrain_source(&run, &cfg).unwrap();
    let source_hash = run.file_hash("source.ckpt").unwrap();

    // re-run both stages: byte-identical outputs
    stage_corpus(&run, &cfg).unwrap();
    assert_eq!(run.file_hash("corpus.bin").unwrap(), corpus_hash);
    stage_pretrain_source(&run, &cfg).unwrap();
    assert_eq!(run.file_hash("source.ckpt").unwrap(), source_hash);

    // plan determinism: identical cache + seed -> identical plan bytes
    stage_distill(&run, &cfg).unwrap();
    stage_fold(&run, &cfg).unwrap();
    stage_tune(&run, &cfg).unwrap();
    stage_cache(&run, &cfg).unwrap();
    stage_plan(&run, &cfg).unwrap();
    let plan_hash = run.file_hash("plan.json").unwrap();
    stage_plan(&run, &cfg).unwrap();
    assert_eq!(run.file_hash("plan.json").unwrap(), plan_hash);
}

#[test]
fn report_on_empty_run_succeeds_with_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let cfg = micro_config(93);
    stage_report(&run, &cfg).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.path("report.json")).unwrap()).unwrap();
    assert!(report["loss_curves"].as_object().unwrap().is_empty());
    let csv = std::fs::read_to_string(run.path("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "header only");
}

#[test]
fn cache_replay_matches_live_frozen_routing() {
    // build grouter + corpus via the early stages
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let mut cfg = micro_config(94);
    cfg.budgets.source_tokens = 80 * 8 * 32;
    cfg.budgets.distill_tokens = 150 * 8 * 32;
    stage_corpus(&run, &cfg).unwrap();
    stage_pretrain_source(&run, &cfg).unwrap();
    stage_distill(&run, &cfg).unwrap();
    stage_fold(&run, &cfg).unwrap();
    stage_tune(&run, &cfg).unwrap();
    stage_cache(&run, &cfg).unwrap();

    let corpus = preroute_core::corpus::load(&run.path("corpus.bin")).unwrap();
    let fz = FrozenGrouter::load(
        &run.path("grouter.ckpt"),
        cfg.target.top_k,
        cfg.target.normalizer,
    )
    .unwrap();
    let cache = RouteCache::load(&run.path("route.cache")).unwrap();

    // per-token: identical expert sets; stored scores within bf16
    // quantization of the live logits
    let len = corpus.seq_len - 1;
    let e = cache.num_experts as usize;
    for seq in 0..8u64 {
        let tokens = corpus.train_seq(seq as usize)[..len].to_vec();
        let live_scores = fz.scores(&tokens, 1).unwrap();
        let live = fz.route(&tokens, 1).unwrap();
        let replay = cache
            .sequence_decisions(seq, cfg.target.normalizer)
            .unwrap();
        for (t, (l, r)) in live.iter().zip(&replay).enumerate() {
            assert_eq!(l.experts, r.experts, "replayed expert sets must match");
            for (expert, stored) in cache.token_entries(seq * len as u64 + t as u64).unwrap() {
                let exact = live_scores[t * e + expert as usize];
                assert!(
                    (stored - exact).abs() <= exact.abs() / 256.0 + 1e-6,
                    "stored score {stored} vs live {exact}"
                );
            }
        }
    }

    // paired training runs: per-step |delta loss| < 1e-3. SGD keeps the
    // trajectory perturbation proportional to the 16-bit quantization noise
    // (adaptive optimizers amplify any weight difference to lr-sized steps).
    let opts = TrainOptions {
        steps: 60,
        batch: 4,
        seed: 77,
        optimizer: preroute_core::optim::OptimizerKind::Sgd,
        schedule: preroute_core::optim::Schedule::Constant { lr: 1e-3 },
        checkpoint_every: 0,
        valid_cap: 8,
        ..TrainOptions::default()
    };
    let live_mode = TrainRouterMode::Frozen(&fz);
    let live_run = train_lm(&cfg.target, &corpus, &live_mode, &opts).unwrap();
    let provider = CacheProvider::new(cache, cfg.target.normalizer);
    let replay_mode = TrainRouterMode::Frozen(&provider);
    let replay_run = train_lm(&cfg.target, &corpus, &replay_mode, &opts).unwrap();
    for (a, b) in live_run.metric_log.iter().zip(&replay_run.metric_log) {
        assert!(
            (a.loss - b.loss).abs() < 1e-3,
            "step {}: live {} vs replay {}",
            a.step,
            a.loss,
            b.loss
        );
    }
}
