use std::path::Path;
use std::process::{Command, Output};

use drt_core::model::{ModelConfig, RoutedLm};
use drt_core::training::Checkpoint;
use serde_json::Value;

fn drt(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_drt"));
    c.args(args).env("RUST_LOG", "warn").env_remove("DRT_SEED");
    if let Some(s) = seed_env {
        c.env("DRT_SEED", s);
    }
    c.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = drt(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn params_report_has_rows_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["analyze", "params", "--preset", "paper", "--out", p(dir.path())]);
    let r = json(&dir.path().join("params.json"));
    assert_eq!(r["operation"], "params");
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(r["payload"]["routed"]["total"], 433_124_928u64);
    let csv = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert!(csv.starts_with("component,params\n"));
    assert!(csv.contains("baseline_total,416971776"));
}

#[test]
fn ci_and_flops() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["analyze", "ci", "--p1", "0.538", "--p2", "0.518", "--n", "500", "--out", p(dir.path())]);
    let h = json(&dir.path().join("ci.json"))["payload"]["half_width"].as_f64().unwrap();
    assert!((h - 0.062).abs() < 0.001, "{h}");
    ok(&["analyze", "flops", "--preset", "paper", "--out", p(dir.path())]);
    let rows = json(&dir.path().join("flops.json"))["payload"]["rows"].clone();
    let r128 = rows[0]["overhead_ratio"].as_f64().unwrap();
    let r1024 = rows[1]["overhead_ratio"].as_f64().unwrap();
    assert!(r1024 < r128 && r1024 < 1e-3);
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--preset", "toy", "--steps", "0", "--seed", "3", "--n-seqs", "10", "--out", p(dir.path())]);
    let ck = Checkpoint::<f32>::load(&dir.path().join("routed.drtc")).unwrap();
    assert_eq!(ck.model, RoutedLm::<f32>::init(&ModelConfig::toy(), 3).unwrap());
    assert!(ck.opt.is_none());
    assert_eq!(ck.step, 0);
    assert!(!dir.path().join("baseline.drtc").exists());
}

#[test]
fn seed_comes_from_environment_unless_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let args = ["train", "--steps", "0", "--n-seqs", "4", "--out", out];
    assert!(drt(&args, Some("42")).status.success());
    assert_eq!(json(&dir.path().join("run_config.json"))["seed"], 42);
    assert!(drt(&[&args[..], &["--seed", "9"]].concat(), Some("42")).status.success());
    assert_eq!(json(&dir.path().join("run_config.json"))["seed"], 9);
    let bad = drt(&args, Some("forty"));
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"model": "toy", "train": {"steps": "ten"}}"#).unwrap();
    let out = drt(&["train", "--config", p(&cfg), "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.steps"), "{err}");

    std::fs::write(&cfg, r#"{"model": "toy", "colour": 1}"#).unwrap();
    let out = drt(&["train", "--config", p(&cfg)], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    std::fs::write(&cfg, r#"{"model": {"n_layers": 2}}"#).unwrap();
    assert_eq!(drt(&["train", "--config", p(&cfg)], None).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(drt(&["--help"], None).status.code(), Some(0));
    assert_eq!(drt(&["analyze", "nonsense"], None).status.code(), Some(1));
    let missing = dir.path().join("absent.drtc");
    let out = drt(&["analyze", "vocab", "--ckpt", p(&missing), "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.drtc");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let out = drt(&["analyze", "vocab", "--ckpt", p(&junk), "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(2));
    let out = drt(&["analyze", "ci", "--p1", "0.5", "--p2", "0.5", "--n", "0", "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
    let out = drt(&["train", "--task", "text", "--steps", "0", "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyses_run_on_a_small_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train", "--preset", "toy", "--steps", "3", "--batch-size", "2", "--n-seqs", "20", "--models", "both",
        "--out", p(&run),
    ]);
    let metrics = std::fs::read_to_string(run.join("routed_metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2, "{metrics}");
    let ck = run.join("routed.drtc");
    let reports = dir.path().join("reports");
    let text = dir.path().join("t.txt");
    std::fs::write(&text, "a b c d e f g. ".repeat(20)).unwrap();
    let common = ["--ckpt", p(&ck), "--out", p(&reports)];
    ok(&[&["analyze", "table3", "--n-seqs", "6"][..], &common].concat());
    let t3 = json(&reports.join("table3.json"));
    assert_eq!(t3["payload"]["rows"].as_array().unwrap().len(), 3);
    ok(&[&["analyze", "table2", "--prompt", "abc", "--target", "d"][..], &common].concat());
    let t2 = json(&reports.join("table2.json"));
    let pl = &t2["payload"];
    let full = pl["full_logit"].as_f64().unwrap();
    assert!(full.is_finite());
    ok(&[&["analyze", "table4", "--corpus", p(&text), "--max-seqs", "2", "--chunk", "16"][..], &common].concat());
    assert_eq!(json(&reports.join("table4.json"))["payload"]["rows"].as_array().unwrap().len(), 4);
    let out = drt(&[&["analyze", "stats", "--corpus", p(&text)][..], &common].concat(), None);
    assert_eq!(out.status.code(), Some(1), "stats needs domains");
    let out = drt(&[&["analyze", "table1", "--prompt", "abc", "--target", "de"][..], &common].concat(), None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_a_ratio() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--preset", "toy", "--seq-len", "16,300", "--trials", "5", "--out", p(dir.path())]);
    let r = json(&dir.path().join("bench.json"));
    let rows = r["payload"]["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let ratio = row["ratio"].as_f64().unwrap();
        assert!(ratio > 0.0 && ratio < 1.5, "{ratio}");
        assert_eq!(row["routed"]["trials"].as_array().unwrap().len(), 5);
    }
    assert!(r["payload"]["disclaimer"].as_str().unwrap().contains("not comparable"));
    let out = drt(&["bench", "--trials", "2", "--out", p(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
}
