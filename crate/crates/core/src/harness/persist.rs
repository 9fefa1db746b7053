use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::driver::{Event, Learner, RunState};
use super::metrics::{compute_metrics, MetricsReport, PerfMatrix};
use crate::error::{ensure, MvpError, Result};
use crate::synth::{derive_seed, make_task_stream, FrozenBackbone};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const PERF_FILE: &str = "perf_matrix.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TIMING_FILE: &str = "timing.json";

/// Versioned snapshot of a run at a task boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub backbone: FrozenBackbone,
    pub learner: Learner,
    pub perf: PerfMatrix,
}

impl Checkpoint {
    pub fn of(state: &RunState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: state.config.hash(),
            config: state.config.clone(),
            backbone: state.backbone.clone(),
            learner: state.learner.clone(),
            perf: state.perf.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and verifies version and config hash.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| MvpError::Checkpoint(format!("not a JSON document: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        ensure!(
            version == Some(u64::from(CHECKPOINT_VERSION)),
            Checkpoint,
            "format version {version:?}, expected {CHECKPOINT_VERSION}"
        );
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| MvpError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let actual = ck.config.hash();
        ensure!(
            ck.config_hash == actual,
            Checkpoint,
            "stored config hash {} does not match the stored config ({actual})",
            ck.config_hash
        );
        ensure!(
            ck.perf.config_hash == actual,
            Checkpoint,
            "performance matrix belongs to config {}",
            ck.perf.config_hash
        );
        ensure!(
            ck.backbone.dims == ck.config.backbone_dims(),
            Checkpoint,
            "backbone dimensions disagree with the config"
        );
        Ok(ck)
    }

    pub fn into_state(self) -> Result<RunState> {
        let tasks = make_task_stream(&self.config.stream, derive_seed(self.config.seed, &[10]))?;
        ensure!(
            tasks.len() == self.perf.n_tasks(),
            Checkpoint,
            "{} recorded tasks for a stream of {}",
            self.perf.n_tasks(),
            tasks.len()
        );
        Ok(RunState {
            config: self.config,
            backbone: self.backbone,
            tasks,
            learner: self.learner,
            perf: self.perf,
        })
    }
}

pub fn save_checkpoint(state: &RunState, path: &Path) -> Result<()> {
    write_atomic(path, Checkpoint::of(state).to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<RunState> {
    Checkpoint::from_json(&fs::read_to_string(path)?)?.into_state()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for e in events {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `strategy,task,metric,value` rows; a missing transfer has an empty value.
pub fn report_rows(m: &MetricsReport) -> Vec<[String; 4]> {
    let mut rows = Vec::new();
    let metrics: [(&str, fn(&super::metrics::TaskMetrics) -> Option<f64>); 5] = [
        ("last", |t| Some(t.last)),
        ("avg", |t| Some(t.avg)),
        ("transfer", |t| t.transfer),
        ("just_learned", |t| Some(t.just_learned)),
        ("zero_shot", |t| Some(t.zero_shot)),
    ];
    for (name, get) in metrics {
        for t in &m.tasks {
            rows.push([
                m.strategy.clone(),
                t.task.to_string(),
                name.to_string(),
                get(t).map_or_else(String::new, |v| v.to_string()),
            ]);
        }
    }
    rows
}

pub fn write_report_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["strategy", "task", "metric", "value"]).map_err(csv_err)?;
    for m in reports {
        for row in report_rows(m) {
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `strategy,step,task,family,accuracy`: one row per entry of each matrix.
pub fn write_curves_csv(path: &Path, matrices: &[PerfMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["strategy", "step", "task", "family", "accuracy"]).map_err(csv_err)?;
    for p in matrices {
        for (t, row) in p.rows.iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                w.write_record([
                    p.strategy.clone(),
                    t.to_string(),
                    j.to_string(),
                    p.families[j].to_string(),
                    acc.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> MvpError {
    MvpError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where artifacts go; nothing is written without it.
    pub out_dir: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many finished tasks.
    pub stop_after: Option<usize>,
    /// Continue from `out_dir/checkpoint.json` when present.
    pub resume: bool,
}

pub struct RunOutput {
    pub state: RunState,
    /// Present once every task has been learned.
    pub report: Option<MetricsReport>,
}

/// Pre-trains, then learns and evaluates every task in order, persisting a
/// checkpoint after each one.
pub fn run_stream(config: &RunConfig, opts: &RunOptions) -> Result<RunOutput> {
    let started = Instant::now();
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let ck_path = dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut state = match &ck_path {
        Some(p) if opts.resume && p.exists() => {
            let s = load_checkpoint(p)?;
            ensure!(
                s.config == *config,
                Checkpoint,
                "checkpoint at {} was written for config {}, not {}",
                p.display(),
                s.config.hash(),
                config.hash()
            );
            log::info!("resuming after {} of {} tasks", s.completed(), s.tasks.len());
            s
        }
        _ => {
            let s = RunState::init(config.clone())?;
            if let Some(d) = dir {
                let _ = fs::remove_file(d.join(EVENTS_FILE));
                fs::write(d.join("config.json"), config.to_json_pretty() + "\n")?;
            }
            if let Some(p) = &ck_path {
                save_checkpoint(&s, p)?;
            }
            s
        }
    };
    let mut step_seconds = Vec::new();
    while !state.is_finished() && opts.stop_after.is_none_or(|n| state.completed() < n) {
        let t0 = Instant::now();
        let mut events = Vec::new();
        state.step(&mut events)?;
        step_seconds.push(t0.elapsed().as_secs_f64());
        log::info!(
            "task {} done in {:.1}s: {:?}",
            state.completed() - 1,
            t0.elapsed().as_secs_f64(),
            state.perf.rows.last()
        );
        if let Some(d) = dir {
            append_events(&d.join(EVENTS_FILE), &events)?;
            write_json(&d.join(PERF_FILE), &state.perf)?;
            save_checkpoint(&state, ck_path.as_deref().expect("dir implies path"))?;
        }
    }
    let report = if state.is_finished() {
        let m = compute_metrics(&state.perf)?;
        if let Some(d) = dir {
            write_json(&d.join(PERF_FILE), &state.perf)?;
            write_json(&d.join(METRICS_FILE), &m)?;
            write_report_csv(&d.join(REPORT_FILE), std::slice::from_ref(&m))?;
            write_curves_csv(&d.join(CURVES_FILE), std::slice::from_ref(&state.perf))?;
            write_json(
                &d.join(TIMING_FILE),
                &json!({ "wall_seconds": started.elapsed().as_secs_f64(), "step_seconds": step_seconds }),
            )?;
        }
        Some(m)
    } else {
        None
    };
    Ok(RunOutput { state, report })
}
