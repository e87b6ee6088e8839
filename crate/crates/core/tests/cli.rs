use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rsb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsb")).args(args).env("RSB_OUT_DIR", dir).output().expect("binary runs")
}

fn artifact(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

#[test]
fn eval_psi_zero_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = rsb(dir.path(), &["eval-psi", "--c", "1", "--beta", "1", "--m", "0,0", "--J", "+1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = artifact(dir.path(), "eval-psi");
    let edge = a["result"]["psi_edge"].as_f64().unwrap();
    assert!((edge - (4.0 * 1f64.cosh()).ln()).abs() < 1e-12);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, a);
    assert_eq!(a["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn martingale_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = rsb(dir.path(), &["invariants", "--suite", "martingale", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("invariants-martingale.csv").exists());
}

#[test]
fn franz_leone_gap_is_within_allowance() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        rsb(dir.path(), &["franz-leone", "--n", "16", "--c", "3", "--beta", "0.5", "--seed", "1", "--samples", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &artifact(dir.path(), "franz-leone")["result"];
    for key in ["bound", "estimate", "gap"] {
        assert!(r[key].is_f64(), "missing {key}");
    }
    assert!(r["gap"].as_f64().unwrap() >= -0.08);
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args =
        ["eval-krsb", "--k", "1", "--c", "2", "--seed", "5", "--evaluator", "mc", "--outer", "256", "--inner", "4"];
    let first = rsb(dir.path(), &args);
    let second = rsb(dir.path(), &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "beta = 0.4\nc = 3\nk = 0\nbudget = 60\n").unwrap();
    let out = rsb(dir.path(), &["optimize", "--config", cfg.to_str().unwrap(), "--set", "beta=0.6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = artifact(dir.path(), "optimize");
    assert_eq!(a["settings"]["beta"], 0.6);
    assert_eq!(a["settings"]["c"], 3);
    assert!(a["result"]["m_star"].is_f64());
}

#[test]
fn optimize_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = rsb(dir.path(), &["optimize", "--k", "1", "--c", "2", "--beta", "1", "--budget", "60", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("optimize-trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,best,digest,se\n"));
    assert!(trace.lines().count() > 2);
}

#[test]
fn discretize_meets_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = rsb(dir.path(), &["discretize-mu", "--cdf", "power:0.5", "--tol", "0.01"]);
    assert!(out.status.success());
    let r = &artifact(dir.path(), "discretize-mu")["result"];
    assert!(r["sup_distance"].as_f64().unwrap() <= 0.01);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rsb(dir.path(), &["eval-psi", "--c", "1", "--m", "0,0,0"]).status.code(), Some(1));
    assert_eq!(rsb(dir.path(), &["oracle", "--set", "nonsense=3"]).status.code(), Some(1));
    assert_eq!(rsb(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(rsb(dir.path(), &["oracle", "--n", "40"]).status.code(), Some(1));
}

#[test]
fn failed_check_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // an impossible allowance turns the comparison into a failure
    let out = rsb(
        dir.path(),
        &["franz-leone", "--n", "8", "--c", "3", "--samples", "4", "--seed", "1", "--set", "allowance=-5"],
    );
    assert_eq!(out.status.code(), Some(2));
}
