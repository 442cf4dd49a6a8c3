//! End-to-end checks of the `preroute` binary surface: the direct-file
//! subcommand forms, run-dir stages, error paths, and the seed override.

use std::path::Path;
use std::process::Command;

use preroute_core::corpus::{generate, CorpusSpec};
use preroute_core::graph::Graph;
use preroute_core::grouter::{Grouter, GrouterConfig};

fn preroute() -> Command {
    Command::new(env!("CARGO_BIN_EXE_preroute"))
}

fn make_fixtures(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let corpus = generate(&CorpusSpec {
        vocab_size: 64,
        domains: 4,
        seq_len: 17,
        train_sequences: 80,
        valid_sequences: 8,
        skew: 1.0,
        seed: 5,
    })
    .unwrap();
    let corpus_path = dir.join("corpus.bin");
    preroute_core::corpus::save(&corpus, &corpus_path).unwrap();

    let mut g = Graph::new();
    let mut rng = preroute_core::rng::rng_from_seed(6);
    let mut grouter = Grouter::init(
        &mut g,
        GrouterConfig {
            vocab_size: 64,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            num_experts_out: 8,
            use_positions: true,
            max_seq_len: 16,
        },
        &mut rng,
    )
    .unwrap();
    grouter.freeze(&mut g);
    let grouter_path = dir.join("grouter.ckpt");
    grouter.save(&g, &grouter_path).unwrap();
    (grouter_path, corpus_path)
}

#[test]
fn cache_plan_simulate_direct_file_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (grouter, corpus) = make_fixtures(dir.path());
    let cache = dir.path().join("route.cache");

    let out = preroute()
        .args(["cache", "--grouter"])
        .arg(&grouter)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&cache)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cache.exists());

    let plan = dir.path().join("plan.json");
    let out = preroute()
        .args(["plan", "--cache"])
        .arg(&cache)
        .args(["--partitions", "4", "--granularity", "node", "--out"])
        .arg(&plan)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(plan.exists());

    // gpu granularity is accepted too
    let out = preroute()
        .args(["plan", "--cache"])
        .arg(&cache)
        .args(["--partitions", "2", "--granularity", "gpu", "--out"])
        .arg(dir.path().join("plan_gpu.json"))
        .output()
        .unwrap();
    assert!(out.status.success());

    let out = preroute()
        .args(["simulate", "--cache"])
        .arg(&cache)
        .arg("--plan")
        .arg(&plan)
        .args(["--payload-bytes", "32"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("savings_vs_random") || stdout.lines().count() >= 2);
}

#[test]
fn missing_artifact_fails_with_stage_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = preroute()
        .args(["distill", "--run-dir"])
        .arg(dir.path().join("run"))
        .args(["--preset", "nano"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("corpus"),
        "error should name the stage to run first: {stderr}"
    );
}

#[test]
fn corpus_stage_respects_seed_env_override() {
    let dir = tempfile::tempdir().unwrap();
    // tiny corpus spec so the stage is fast
    let config = dir.path().join("config.txt");
    std::fs::write(
        &config,
        "corpus.train_sequences = 50\ncorpus.valid_sequences = 8\n",
    )
    .unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    let run_c = dir.path().join("c");
    for (run, seed) in [(&run_a, "7"), (&run_b, "7"), (&run_c, "8")] {
        let out = preroute()
            .args(["corpus", "--run-dir"])
            .arg(run)
            .arg("--config")
            .arg(&config)
            .env("PREROUTE_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(run_a.join("corpus.bin")).unwrap();
    let b = std::fs::read(run_b.join("corpus.bin")).unwrap();
    let c = std::fs::read(run_c.join("corpus.bin")).unwrap();
    assert_eq!(a, b, "same seed must reproduce identical corpus bytes");
    assert_ne!(a, c, "different seed must change the corpus");
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = make_fixtures(dir.path());
    // cache with a partial direct-mode flag set
    let out = preroute()
        .args(["cache", "--corpus"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert!(!out.status.success());
    // unknown granularity
    let out = preroute()
        .args(["plan", "--granularity", "rack"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
