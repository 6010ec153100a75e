use std::path::Path;

use assert_cmd::Command;
use atrl::target::{Rank, TargetSpec};
use sha2::{Digest, Sha256};

fn atrl() -> Command {
    Command::cargo_bin("atrl").unwrap()
}

fn file_hash(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn stderr_json(out: &std::process::Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-readable error line")
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.seqd");
    let b = dir.path().join("b.seqd");
    for out in [&a, &b] {
        atrl()
            .args(["gen-data", "--kind", "gravity", "--tau", "5", "--count", "100", "--seed", "7", "--out"])
            .arg(out)
            .assert()
            .success();
    }
    assert_eq!(file_hash(&a), file_hash(&b));
    let data = atrl::datasets::load_dataset(&a).unwrap();
    assert_eq!((data.count(), data.tau, data.d, data.d_out), (100, 5, 3, 2));
}

#[test]
fn pod_prints_the_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TargetSpec::sweep_default(1.0, Rank::Finite(6), 2, 0).unwrap();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let pod_path = dir.path().join("spec.pod");
    let out = atrl()
        .args(["pod", "--grid", "256", "--show", "8", "--target"])
        .arg(&spec_path)
        .arg("--out")
        .arg(&pod_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let sigma: Vec<f64> = stdout
        .lines()
        .filter(|l| l.starts_with("sigma["))
        .map(|l| l.split(" = ").nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(sigma.len(), 8);
    for (k, s) in sigma.iter().enumerate() {
        let want = if k < 6 { 1.0 / (k + 1) as f64 } else { 0.0 };
        assert!((s - want).abs() < 1e-6, "sigma[{}] = {s}", k + 1);
    }
    let saved = atrl::pod::SpectralFactorization::load(&pod_path).unwrap();
    assert!((saved.sigma[0] - 1.0).abs() < 1e-6);
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let out = atrl().arg("verify").output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().count() >= 4);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn bad_flags_are_usage_errors() {
    atrl().args(["gen-data", "--kind", "gravity"]).assert().code(2);
    atrl().args(["pod", "--frobnicate"]).assert().code(2);
    atrl().arg("no-such-command").assert().code(2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(
        &path,
        r#"{"version": 1, "experiment": {"kind": "sweep", "params": {"typo_key": 3}}}"#,
    )
    .unwrap();
    let out = atrl().arg("sweep").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");

    std::fs::write(&path, r#"{"version": 1, "experiment": {"kind": "gravity", "params": {}}}"#).unwrap();
    let out = atrl().arg("sweep").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_store_fails_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("r.jsonl");
    std::fs::write(&records, "").unwrap();
    let out_dir = dir.path().join("report");
    let out = atrl()
        .args(["report", "--kind", "sweep", "--records"])
        .arg(&records)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "runtime");
    assert!(!out_dir.exists());
}

#[test]
fn train_config_runs_and_appends_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.seqd");
    atrl()
        .args(["gen-data", "--kind", "linear-exp", "--tau", "4", "--count", "32", "--out"])
        .arg(&data)
        .assert()
        .success();
    let cfg = serde_json::json!({
        "version": 1,
        "experiment": {"kind": "train", "params": {
            "train_data": data,
            "model": {"type": "rnn", "config": {"hidden": 4}},
            "train": {"epochs": 3, "batch_size": 8}
        }},
    });
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let records = dir.path().join("r.jsonl");
    for _ in 0..2 {
        atrl()
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--records")
            .arg(&records)
            .assert()
            .success();
    }
    let recs = atrl::training::records::read_records(&records).unwrap();
    assert!(!recs.is_empty() && recs.len() % 2 == 0);
    let half = recs.len() / 2;
    assert_eq!(recs[..half], recs[half..]);
}
