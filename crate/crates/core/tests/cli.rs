use std::path::Path;
use std::process::{Command, Output};

use airvote::bounds::BoundFormulas;
use airvote::cli::{cmd_validate_bounds_with, BOUNDS_HEADER, EXIT_BOUND_FAILURE, METRICS_HEADER};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_airvote"));
    c.env_remove("AIRVOTE_OUT");
    c
}

fn minimal(out: &Path) -> Value {
    json!({
        "experiment": {
            "k": 10, "batch_size": 4, "eta": 0.01, "rounds": 20, "seed": 3,
            "c": 0.2, "p": 0.2, "snr_db": 10.0, "attack": {"kind": "mimic"},
            "dataset": {"kind": "synthetic", "classes": 2, "per_class": 100,
                        "features": 5, "separation": 2.0, "test_per_class": 50}
        },
        "output_dir": out,
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_reproducible_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write(tmp.path(), "cfg.json", &minimal(&out));
    let o = bin().args(["train", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 21);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["run_id"].as_str().unwrap().len(), 12);
    assert_eq!(summary["operation_counts"]["aircomp"], 1);
    assert_eq!(summary["power_violations"], 0);

    let mut four = minimal(&tmp.path().join("run4"));
    four["threads"] = json!(4);
    let cfg4 = write(tmp.path(), "cfg4.json", &four);
    assert_eq!(code(&bin().args(["train", cfg4.to_str().unwrap()]).output().unwrap()), 0);
    let again = tmp.path().join("again");
    assert_eq!(code(&bin().args(["train", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]).output().unwrap()), 0);
    for f in ["metrics.csv", "run.json"] {
        let a = std::fs::read(out.join(f)).unwrap();
        assert_eq!(a, std::fs::read(again.join(f)).unwrap(), "{f} differs on rerun");
        assert_eq!(a, std::fs::read(tmp.path().join("run4").join(f)).unwrap(), "{f} differs with 4 threads");
    }
}

#[test]
fn env_overrides_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &minimal(&tmp.path().join("configured")));
    let env_out = tmp.path().join("from-env");
    let o = bin().env("AIRVOTE_OUT", &env_out).args(["train", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(env_out.join("metrics.csv").exists());
    assert!(!tmp.path().join("configured").exists());
}

#[test]
fn schema_errors_exit_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let mut bad = minimal(&out);
    bad["experiment"]["learning_rate"] = json!(0.1);
    let cfg = write(tmp.path(), "bad.json", &bad);
    let o = bin().args(["train", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let mut bad = minimal(&out);
    bad["experiment"]["scheme"] = json!("krum");
    let cfg = write(tmp.path(), "bad2.json", &bad);
    assert_eq!(code(&bin().args(["train", cfg.to_str().unwrap()]).output().unwrap()), 2);

    let cfg = write(tmp.path(), "nobounds.json", &minimal(&out));
    assert_eq!(code(&bin().args(["validate-bounds", cfg.to_str().unwrap()]).output().unwrap()), 2);
    let empty = json!({"bounds": {"seed": 1}, "output_dir": out});
    let cfg = write(tmp.path(), "empty.json", &empty);
    assert_eq!(code(&bin().args(["validate-bounds", cfg.to_str().unwrap()]).output().unwrap()), 2);
    assert_eq!(code(&bin().args(["train", "/nonexistent/cfg.json"]).output().unwrap()), 2);
    assert!(!out.exists());
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&tmp.path().join("out"));
    cfg["experiment"]["dataset"] = json!({
        "kind": "mnist",
        "train_images": "/nonexistent/a", "train_labels": "/nonexistent/b",
        "test_images": "/nonexistent/c", "test_labels": "/nonexistent/d"
    });
    let p = write(tmp.path(), "mnist.json", &cfg);
    assert_eq!(code(&bin().args(["train", p.to_str().unwrap()]).output().unwrap()), 1);
}

fn small_suite(out: &Path) -> Value {
    json!({
        "bounds": {
            "trials": 10000, "seed": 5,
            "prop1": {"j": [1.0, 2.0], "s": [1, 3]},
            "thm1": {"k": [50], "p": [0.05, 0.1], "j": [1.0]},
            "thm2": {"k": [20], "c": [0.2], "p": [0.3], "j": [2.0], "snr_db": [10.0, null]}
        },
        "output_dir": out,
    })
}

#[test]
fn validate_bounds_reports_and_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let cfg = write(tmp.path(), "suite.json", &small_suite(&out));
    let o = bin().args(["validate-bounds", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], BOUNDS_HEADER);
    assert_eq!(lines.len(), 1 + 4 + 2 + 2);
    // p = 0.05 ≤ 4/(J²K) = 0.08 is skipped
    assert!(lines.iter().any(|l| l.starts_with("thm1,K=50;p=0.05;J=1,,,,") && l.ends_with(",false,skipped")));

    let corrupted = BoundFormulas { prop1: |j, s| 0.1 / (j * (s as f64).sqrt()), ..BoundFormulas::default() };
    let code = cmd_validate_bounds_with(&cfg, Some(&tmp.path().join("c")), &corrupted);
    assert_eq!(code, EXIT_BOUND_FAILURE);
    let csv = std::fs::read_to_string(tmp.path().join("c").join("bounds.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("prop1") && l.ends_with(",true,false")));
}

#[test]
fn counts_prints_table_cells() {
    let o = bin().args(["counts", "--scheme", "hierarchical", "-k", "50", "-p", "0.1"]).output().unwrap();
    assert_eq!(code(&o), 0);
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("local_sgd=250") && s.contains("aircomp=1") && s.contains("local_sgd_cell=5x50"));
    let o = bin().args(["counts", "--scheme", "rotaf", "-k", "50", "-g", "10"]).output().unwrap();
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("gm=1 aircomp=10"));
    let o = bin().args(["counts", "--scheme", "aircomp_gm", "-u", "200"]).output().unwrap();
    assert!(String::from_utf8(o.stdout).unwrap().contains("aircomp=200"));
    assert_eq!(code(&bin().args(["counts", "--scheme", "bulyan"]).output().unwrap()), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let train = airvote::config::ConfigFile::load(&dir.join("train.json")).unwrap();
    assert!(train.experiment.is_some());
    let bounds = airvote::config::ConfigFile::load(&dir.join("bounds.json")).unwrap();
    assert_eq!(bounds.bounds.unwrap().point_count(), 16 + 6 + 12);
}
