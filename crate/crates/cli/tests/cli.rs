use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn lexinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexinet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validate_reports_the_network_size() {
    let path = fixture("appendix_c.json");
    let out = lexinet(&["validate", "--scenario", path.to_str().expect("utf-8 path")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("31 links") && stdout.contains("3 agents"), "{stdout}");
}

#[test]
fn validate_fails_on_a_bad_ratio_sum() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("toy_grid.json")).expect("fixture")).expect("json");
    for t in doc["turning"].as_array_mut().expect("turning table") {
        if t["from"] == 3 {
            let r = t["ratio"].as_f64().expect("ratio");
            t["ratio"] = (0.9 * r).into();
        }
    }
    let path = dir.path().join("bad.json");
    fs::write(&path, doc.to_string()).expect("write");
    let out = lexinet(&["validate", "--scenario", path.to_str().expect("utf-8 path")]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("link 3"), "{}", text(&out.stderr));
}

#[test]
fn run_writes_metrics_and_traces() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_dir = dir.path().join("out");
    let scenario = fixture("toy_grid.json");
    let out = lexinet(&[
        "run",
        "--scenario",
        scenario.to_str().expect("utf-8 path"),
        "--strategy",
        "lexi",
        "--out",
        out_dir.to_str().expect("utf-8 path"),
        "--trace-steps",
        "0,3",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let steps = fs::read_to_string(out_dir.join("steps.csv")).expect("steps.csv");
    assert_eq!(steps.lines().count(), 16);
    for t in [0, 3] {
        let trace = fs::read_to_string(out_dir.join(format!("convergence_{t}.csv"))).expect("trace");
        assert!(trace.starts_with("stage,iteration,residual,step,cost"));
        assert!(trace.lines().count() > 1);
    }
    assert!(out_dir.join("occupancy.csv").exists());
}

#[test]
fn run_rejects_the_unimplemented_strategy() {
    let dir = tempfile::tempdir().expect("tempdir");
    let scenario = fixture("toy_grid.json");
    let out = lexinet(&[
        "run",
        "--scenario",
        scenario.to_str().expect("utf-8 path"),
        "--strategy",
        "max-pressure",
        "--out",
        dir.path().to_str().expect("utf-8 path"),
    ]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("unsupported — see docs"), "{}", text(&out.stderr));
}

#[test]
fn solve_once_dumps_feed_the_oracle() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dumps = dir.path().join("problems");
    let scenario = fixture("appendix_c.json");
    let out = lexinet(&[
        "solve-once",
        "--scenario",
        scenario.to_str().expect("utf-8 path"),
        "--dump-problems",
        dumps.to_str().expect("utf-8 path"),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = lexinet(&["oracle", "--problems", dumps.to_str().expect("utf-8 path")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.starts_with("quantity"), "{table}");
    let gaps: Vec<f64> = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().last()?.parse().ok())
        .collect();
    assert!(!gaps.is_empty(), "{table}");
    assert!(gaps.iter().all(|&g| g <= 1e-3), "{table}");
}
