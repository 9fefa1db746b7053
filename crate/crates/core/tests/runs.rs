mod common;

use std::fs;

use common::small_config;
use mvp_core::harness::config::CONFIG_SCHEMA;
use mvp_core::harness::persist::{Checkpoint, CHECKPOINT_FILE, EVENTS_FILE, METRICS_FILE, PERF_FILE};
use mvp_core::harness::{
    compute_metrics, load_checkpoint, load_config, parse_config, run_stream, save_checkpoint, Learner,
    MetricsReport, PerfMatrix, RunConfig, RunOptions, RunState, Strategy,
};
use mvp_core::MvpError;
use serde_json::Value;

fn opts(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn shipped_default_config_matches_the_builtin_default() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
    let cfg = load_config(std::path::Path::new(path)).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn schema_names_the_missing_key() {
    let mut v: Value = serde_json::to_value(RunConfig::default()).unwrap();
    v["train"].as_object_mut().unwrap().remove("epochs");
    let err = parse_config(&v.to_string()).unwrap_err();
    let MvpError::Validation(msg) = err else { panic!("{err}") };
    assert!(msg.contains("/train"), "{msg}");
    assert!(msg.contains("required"), "{msg}");
    assert!(msg.contains("epochs"), "{msg}");
}

#[test]
fn schema_rejects_unknown_keys_and_bad_values() {
    let mut v: Value = serde_json::to_value(RunConfig::default()).unwrap();
    v["moe"]["experts"] = 3.into();
    assert!(matches!(parse_config(&v.to_string()), Err(MvpError::Validation(_))));
    let mut v: Value = serde_json::to_value(RunConfig::default()).unwrap();
    v["strategy"] = "ewc".into();
    assert!(matches!(parse_config(&v.to_string()), Err(MvpError::Validation(_))));
    let mut c = RunConfig::default();
    c.model.d_tok = 16;
    assert!(matches!(parse_config(&c.to_json_pretty()), Err(MvpError::Validation(_))));
    assert!(serde_json::from_str::<Value>(CONFIG_SCHEMA).is_ok());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(Strategy::Mvp, 3);
    run_stream(&cfg, &opts(a.path())).unwrap();
    run_stream(&cfg, &opts(b.path())).unwrap();
    for f in [METRICS_FILE, PERF_FILE, CHECKPOINT_FILE, EVENTS_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn persisted_report_is_recomputable_from_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    run_stream(&small_config(Strategy::Mvp, 1), &opts(dir.path())).unwrap();
    let perf: PerfMatrix = serde_json::from_slice(&fs::read(dir.path().join(PERF_FILE)).unwrap()).unwrap();
    let stored: MetricsReport = serde_json::from_slice(&fs::read(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(compute_metrics(&perf).unwrap(), stored);
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Strategy::Mvp, 2);
    let out = run_stream(
        &cfg,
        &RunOptions {
            stop_after: Some(2),
            ..opts(dir.path())
        },
    )
    .unwrap();
    assert!(out.report.is_none());
    let first = dir.path().join(CHECKPOINT_FILE);
    let bytes = fs::read(&first).unwrap();
    let state = load_checkpoint(&first).unwrap();
    assert_eq!(state, out.state);
    let second = dir.path().join("again.json");
    save_checkpoint(&state, &second).unwrap();
    assert_eq!(bytes, fs::read(&second).unwrap());
}

#[test]
fn tampered_checkpoints_are_refused() {
    let state = RunState::init(small_config(Strategy::SharedProjector, 0)).unwrap();
    let text = Checkpoint::of(&state).to_json().unwrap();

    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["config_hash"] = "0".repeat(64).into();
    let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
    assert!(matches!(err, MvpError::Checkpoint(ref m) if m.contains("hash")), "{err}");

    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["config"]["train"]["epochs"] = 99.into();
    assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(MvpError::Checkpoint(_))));

    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = 2.into();
    let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
    assert!(matches!(err, MvpError::Checkpoint(ref m) if m.contains("version")), "{err}");

    assert!(Checkpoint::from_json(&text).is_ok());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let cfg = small_config(Strategy::Mvp, 4);
    let straight = tempfile::tempdir().unwrap();
    run_stream(&cfg, &opts(straight.path())).unwrap();

    let split = tempfile::tempdir().unwrap();
    for stop in [1, 3] {
        let out = run_stream(
            &cfg,
            &RunOptions {
                stop_after: Some(stop),
                resume: true,
                ..opts(split.path())
            },
        )
        .unwrap();
        assert_eq!(out.state.completed(), stop);
    }
    let out = run_stream(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(split.path())
        },
    )
    .unwrap();
    assert!(out.report.is_some());
    for f in [METRICS_FILE, PERF_FILE, CHECKPOINT_FILE, EVENTS_FILE] {
        assert_eq!(
            fs::read(straight.path().join(f)).unwrap(),
            fs::read(split.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Strategy::Mvp, 5);
    run_stream(
        &cfg,
        &RunOptions {
            stop_after: Some(1),
            ..opts(dir.path())
        },
    )
    .unwrap();
    let mut other = cfg.clone();
    other.train.epochs += 1;
    let err = run_stream(
        &other,
        &RunOptions {
            resume: true,
            ..opts(dir.path())
        },
    )
    .err()
    .unwrap();
    assert!(matches!(err, MvpError::Checkpoint(_)), "{err}");
}

#[test]
fn backbone_is_untouched_by_every_strategy() {
    for strategy in [Strategy::Mvp, Strategy::SharedProjector, Strategy::ZeroShot] {
        let cfg = small_config(strategy, 6);
        let before = RunState::init(cfg.clone()).unwrap().backbone.fingerprint();
        let after = run_stream(&cfg, &RunOptions::default()).unwrap().state.backbone.fingerprint();
        assert_eq!(before, after, "{strategy}");
    }
}

#[test]
fn zero_shot_rows_never_change() {
    let out = run_stream(&small_config(Strategy::ZeroShot, 7), &RunOptions::default()).unwrap();
    let p = &out.state.perf;
    for row in &p.rows {
        assert_eq!(row, &p.zero_shot);
    }
    assert!(matches!(out.state.learner, Learner::ZeroShot));
}

#[test]
fn event_log_runs_phases_in_order() {
    let dir = tempfile::tempdir().unwrap();
    run_stream(&small_config(Strategy::Mvp, 8), &opts(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
    let events: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let n_tasks = 4;
    for t in 0..n_tasks {
        let mut phases: Vec<&str> = events
            .iter()
            .filter(|e| e["task"] == t && e["phase"] != "eval")
            .map(|e| e["phase"].as_str().unwrap())
            .collect();
        phases.dedup();
        assert_eq!(phases, ["a", "b", "c", "d"], "task {t}");
    }
    let first_epoch = events.iter().find(|e| e["task"] == 0 && e["phase"] == "a").unwrap();
    assert_eq!(first_epoch["data"]["rec"], 0.0);
    assert_eq!(first_epoch["data"]["bias"], 0.0);
}

#[test]
fn every_finished_task_stores_a_mask() {
    let out = run_stream(&small_config(Strategy::Mvp, 9), &RunOptions::default()).unwrap();
    let Learner::Mvp(st) = &out.state.learner else { unreachable!() };
    assert_eq!(st.stats.len(), out.state.tasks.len());
    for s in &st.stats {
        let mask = s.mask.as_ref().unwrap();
        assert!(mask.iter().any(|m| *m));
        for (j, m) in mask.iter().enumerate() {
            assert!(!m || st.model.bank.cumulative_mask()[j]);
        }
    }
}

#[test]
fn evaluation_is_repeatable() {
    let out = run_stream(&small_config(Strategy::Mvp, 10), &RunOptions::default()).unwrap();
    for j in 0..out.state.tasks.len() {
        assert_eq!(out.state.evaluate(j).unwrap(), out.state.evaluate(j).unwrap());
        assert_eq!(out.state.evaluate(j).unwrap(), out.state.perf.rows.last().unwrap()[j]);
    }
}
