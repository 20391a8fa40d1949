use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusc_core::pipeline::RunConfig;

fn fusc(args: &[&str], run_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusc"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("FUSC_RUN_ROOT");
    if let Some(root) = run_root {
        cmd.env("FUSC_RUN_ROOT", root);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "command failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Synthesizes a small corpus and writes a quick run config for it.
fn setup(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    let out = stdout(&fusc(&["synth", "--out", corpus.to_str().unwrap(), "--seed", "3", "--images", "80"], None));
    assert!(out.contains("manifest:"));
    let manifest = corpus.join("manifest.jsonl");
    assert!(manifest.is_file());
    let text = stdout(&fusc(&["config", "--manifest", manifest.to_str().unwrap(), "--benchmark-seed", "3"], None));
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.cluster.num_clusters, 5);
    cfg.run_root = dir.join("runs");
    cfg.encoder.epochs = 1;
    cfg.encoder.batch_size = 16;
    cfg.encoder.embedding_dim = 16;
    cfg.encoder.projection_dim = 8;
    cfg.neighbors.k = 5;
    cfg.cluster.epochs = 5;
    cfg.cluster.init_scale = 100.0;
    cfg.cluster.batch_size = 32;
    cfg.selflabel.epochs = 1;
    cfg.selflabel.threshold = 0.51;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn full_run_then_resume_and_standalone_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let config = config.to_str().unwrap();

    let first = stdout(&fusc(&["run", "--config", config], None));
    for stage in ["preprocess", "pretrain", "embed", "mine", "cluster", "selflabel", "kmeans", "evaluate", "export"] {
        assert!(first.contains(&format!("{stage}: done")), "{stage} missing from\n{first}");
    }
    assert!(first.contains("CP"));
    let run_dir = dir.path().join("runs/synthetic-3");
    assert!(run_dir.join("export/cluster_manifest.json").is_file());

    let second = stdout(&fusc(&["run", "--config", config], None));
    assert!(!second.contains(": done"), "{second}");
    assert!(second.contains("selflabel: up to date"));

    let json = stdout(&fusc(&["evaluate", "--config", config, "--json"], None));
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["num_clusters"], 5);

    let assignment = run_dir.join("selflabel/assignment.json");
    let manifest = run_dir.join("preprocess/manifest.jsonl");
    let json = stdout(&fusc(
        &["evaluate", "--assignment", assignment.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--merge", "--json"],
        None,
    ));
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["split"], "all");
    assert!(report["merged_cp"].as_f64().unwrap() >= report["cp"].as_f64().unwrap());

    let table = stdout(&fusc(&["evaluate", "--assignment", assignment.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()], None));
    assert!(table.contains("NMI"));
}

#[test]
fn run_root_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    let out = stdout(&fusc(&["preprocess", "--config", config.to_str().unwrap()], Some(&elsewhere)));
    assert!(out.contains("preprocess: done"));
    assert!(elsewhere.join("synthetic-3/preprocess/manifest.jsonl").is_file());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn stage_without_inputs_fails_with_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = fusc(&["evaluate", "--config", config.to_str().unwrap()], None);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing or out of date"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!fusc(&["evaluate", "--assignment", "a.json"], None).status.success());
    assert!(!fusc(&["run", "--config", "run.toml", "--stages", "bogus"], None).status.success());
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert!(!fusc(&["run", "--config", missing.to_str().unwrap()], None).status.success());
}
