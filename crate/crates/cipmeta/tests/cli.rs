use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn cipmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cipmeta")).args(args).output().expect("run cipmeta")
}

fn run_ok(args: &[&str]) {
    let out = cipmeta(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_writes_the_hierarchy() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["analyze", "--graph", data("path5.json").to_str().unwrap(), "--out", out]);
    let h = read_json(&dir.path().join("hierarchy.json"));
    assert_eq!(h["kappa2"], 2);
    assert_eq!(h["kappa3"], 2);
    assert_eq!(h["s_star"], serde_json::json!(["x", "y"]));
}

#[test]
fn kconstant_grid_is_flat_in_lambda() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let graph = data("path5.json");
    run_ok(&["kconstant", "--graph", graph.to_str().unwrap(), "--out", out, "--lambda-grid", "0.72,0.8,0.9"]);
    let k = read_json(&dir.path().join("kconstant.json"));
    assert!(k["lambda_spread"].as_f64().unwrap() <= 1e-4);
    for row in k["rows"].as_array().unwrap() {
        assert!((row["k"].as_f64().unwrap() - 1.0 / 12.0).abs() < 1e-10);
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = cipmeta(&["analyze", "--graph", data("malformed.json").to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));

    let res = cipmeta(&["analyze", "--graph", dir.path().join("missing.json").to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(10));

    let graph = data("three_site.json");
    let res = cipmeta(&["capacity", "--graph", graph.to_str().unwrap(), "--out", out, "--n", "12"]);
    assert_eq!(res.status.code(), Some(4));

    let graph = data("path5.json");
    let res = cipmeta(&["capacity", "--graph", graph.to_str().unwrap(), "--out", out, "--n", "40,20"]);
    assert_eq!(res.status.code(), Some(6));
}

#[test]
fn artifacts_are_byte_identical_across_runs() {
    let graph = data("path5.json");
    let graph = graph.to_str().unwrap();
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for dir in &runs {
        let out = dir.path().to_str().unwrap();
        run_ok(&["analyze", "--graph", graph, "--out", out]);
        run_ok(&["capacity", "--graph", graph, "--out", out, "--n", "12", "--budget", "10000"]);
        run_ok(&["simulate", "--graph", graph, "--out", out, "--n", "4", "--d", "0.5", "--replicas", "50", "--seed", "9"]);
        run_ok(&["report", "--out", out]);
    }
    for name in ["hierarchy.json", "sandwich.csv", "simulate.csv", "simulate.json", "report.md", "manifest.json"] {
        let a = std::fs::read(runs[0].path().join(name)).unwrap();
        let b = std::fs::read(runs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
}

#[test]
fn manifest_accumulates_entries() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let graph = data("path5.json");
    run_ok(&["analyze", "--graph", graph.to_str().unwrap(), "--out", out]);
    run_ok(&["sweep", "--graph", graph.to_str().unwrap(), "--out", out, "--n", "10,20"]);
    run_ok(&["report", "--out", out]);
    let m = read_json(&dir.path().join("manifest.json"));
    let artifacts: Vec<&str> = m.as_array().unwrap().iter().map(|e| e["artifact"].as_str().unwrap()).collect();
    assert_eq!(artifacts, ["hierarchy.json", "sweep.csv", "report.md"]);
    let report = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("## Hierarchy") && report.contains("## Condensation sweep"));
}
