mod common;

use std::time::Instant;

use sha2::{Digest, Sha256};

use common::{run_cli_pipeline, smoke_demos, webnav};

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(webnav(&["frobnicate"]).0, 1);
    assert_eq!(webnav(&["stats", "--bogus"]).0, 1);
    assert_eq!(webnav(&[]).0, 1);
    let (code, err) = webnav(&["evaluate", "--policy", "oracle", "--tasks", "no-such-task", "--out", "/dev/null"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let (code, err) = webnav(&["process", "--in", "/nonexistent/demos.jsonl", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(!err.is_empty());
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(webnav(&["process", "--in", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "learning_rate = -1.0\n").unwrap();
    let out = dir.path().join("p.bin");
    let smoke = smoke_demos();
    let args = ["train-bc", "--in", smoke.to_str().unwrap(), "--steps", "1", "--config", cfg.to_str().unwrap()];
    let (code, err) = webnav(&[&args[..], &["--out", out.to_str().unwrap()]].concat());
    assert_eq!(code, 1, "{err}");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(webnav(&[&args[..], &["--out", out.to_str().unwrap()]].concat()).0, 1);
}

#[test]
fn manifest_records_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.jsonl");
    let smoke = smoke_demos();
    assert_eq!(webnav(&["--seed", "3", "process", "--in", smoke.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 0);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("p.jsonl.manifest.json")).unwrap()).unwrap();
    let hex = |bytes: &[u8]| format!("{:x}", Sha256::digest(bytes));
    assert_eq!(manifest["command"], "process");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["inputs"][smoke.to_str().unwrap()], hex(&std::fs::read(&smoke).unwrap()));
    assert_eq!(manifest["outputs"][out.to_str().unwrap()], hex(&std::fs::read(&out).unwrap()));
}

#[test]
fn every_command_is_deterministic_and_fast() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let first = run_cli_pipeline(a.path(), "1");
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
    let second = run_cli_pipeline(b.path(), "2");
    let names: Vec<_> = first.iter().map(|f| f.0.as_str()).collect();
    assert!(names.len() >= 15, "{names:?}");
    for ((na, da), (nb, db)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}
