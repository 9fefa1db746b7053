mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::small_config;
use mvp_core::harness::Strategy;
use serde_json::Value;

fn mvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(args)
        .env_remove("MVP_SEED_OVERRIDE")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, strategy: Strategy) -> String {
    let path = dir.join(format!("{strategy}.json"));
    fs::write(&path, small_config(strategy, 0).to_json_pretty()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes() {
    let out = mvp(&["gradcheck", "--trials", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradcheck_fails_loudly_under_an_impossible_tolerance() {
    let out = mvp(&["gradcheck", "--trials", "2", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(mvp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mvp(&[]).status.code(), Some(1));
    assert_eq!(mvp(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_key_exits_2_with_schema_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::to_value(small_config(Strategy::Mvp, 0)).unwrap();
    v["loss"].as_object_mut().unwrap().remove("tau");
    let path = dir.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = mvp(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/properties/loss/required"), "{err}");
    assert!(err.contains("tau"), "{err}");
}

#[test]
fn unreadable_config_exits_2() {
    assert_eq!(mvp(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn seed_override_is_applied_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), Strategy::ZeroShot);
    let run_dir = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(["run", &cfg, "--out", run_dir.to_str().unwrap()])
        .env("MVP_SEED_OVERRIDE", "17")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let metrics: Value = serde_json::from_slice(&fs::read(run_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 17);

    let out = Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(["run", &cfg])
        .env("MVP_SEED_OVERRIDE", "-3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for strategy in [Strategy::Mvp, Strategy::SharedProjector] {
        let cfg = write_config(dir.path(), strategy);
        let out_dir = runs.join(strategy.as_str());
        let out = mvp(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["events.jsonl", "perf_matrix.json", "metrics.json", "report.csv", "curves.csv", "checkpoint.json"] {
            assert!(out_dir.join(f).is_file(), "{f}");
        }
    }

    let ck = runs.join("mvp/checkpoint.json");
    let out = mvp(&["eval", ck.to_str().unwrap(), "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(mvp(&["eval", ck.to_str().unwrap(), "4"]).status.code(), Some(2));

    let out = mvp(&["report", runs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let mut reader = csv::Reader::from_path(runs.join("report.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["strategy", "task", "metric", "value"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let n_tasks = 4;
    for strategy in ["mvp", "shared_projector"] {
        for metric in ["last", "avg", "transfer"] {
            let n = rows.iter().filter(|r| &r[0] == strategy && &r[2] == metric).count();
            assert_eq!(n, n_tasks, "{strategy} {metric}");
        }
    }
    let curves = csv::Reader::from_path(runs.join("curves.csv")).unwrap().into_records().count();
    assert_eq!(curves, 2 * n_tasks * n_tasks);
}

#[test]
fn report_without_runs_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mvp(&["report", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn stop_and_resume_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), Strategy::Mvp);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(mvp(&["run", &cfg, "--out", a.to_str().unwrap()]).status.code(), Some(0));
    let out = mvp(&["run", &cfg, "--out", b.to_str().unwrap(), "--stop-after", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!b.join("metrics.json").exists());
    let out = mvp(&["run", &cfg, "--out", b.to_str().unwrap(), "--resume"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}

#[test]
fn sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), Strategy::Mvp);
    let out_dir = dir.path().join("sweep");
    let out = mvp(&[
        "sweep-experts",
        &cfg,
        "--n-experts",
        "1,2",
        "--seeds",
        "0,1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["n_experts", "k", "seed", "mean_last", "mean_avg"]);
    assert_eq!(reader.records().count(), 4);
    assert!(out_dir.join("ne1_seed0/metrics.json").is_file());
}
