use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{compute_metrics, MetricsReport, PerfMatrix};
use super::persist::{
    run_stream, write_curves_csv, write_report_csv, RunOptions, CURVES_FILE, PERF_FILE, REPORT_FILE,
};
use crate::error::{ensure, Result};

/// One finished run of an expert-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_experts: usize,
    pub k: usize,
    pub seed: u64,
    pub mean_last: f64,
    pub mean_avg: f64,
}

/// Runs the stream once per `(n_experts, seed)` pair. With `out_dir`, each run
/// lands in `ne{N}_seed{S}` and the points go to `sweep.csv`.
pub fn sweep_experts(
    base: &RunConfig,
    n_experts: &[usize],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    ensure!(!n_experts.is_empty() && !seeds.is_empty(), Configuration, "empty sweep");
    ensure!(n_experts.iter().all(|&n| n >= 1), Configuration, "expert counts must be positive");
    let mut points = Vec::new();
    for &n in n_experts {
        for &seed in seeds {
            let mut cfg = base.with_experts(n);
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("ne{n}_seed{seed}")));
            let out = run_stream(
                &cfg,
                &RunOptions {
                    out_dir: dir,
                    ..RunOptions::default()
                },
            )?;
            let m = out.report.expect("an uninterrupted run finishes");
            log::info!("N_E = {n}, seed {seed}: mean Last {:.4}", m.mean_last);
            points.push(SweepPoint {
                n_experts: n,
                k: cfg.moe.k,
                seed,
                mean_last: m.mean_last,
                mean_avg: m.mean_avg,
            });
        }
    }
    if let Some(d) = out_dir {
        let mut w = csv::Writer::from_path(d.join("sweep.csv")).map_err(super::persist::csv_err)?;
        for p in &points {
            w.serialize(p).map_err(super::persist::csv_err)?;
        }
        w.flush()?;
    }
    Ok(points)
}

/// Mean Last per expert count, in the order the counts were first seen.
pub fn mean_last_by_experts(points: &[SweepPoint]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = Vec::new();
    for p in points {
        if !order.contains(&p.n_experts) {
            order.push(p.n_experts);
        }
    }
    order
        .into_iter()
        .map(|n| {
            let xs: Vec<f64> = points.iter().filter(|p| p.n_experts == n).map(|p| p.mean_last).collect();
            (n, xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect()
}

/// `dir` itself and its immediate subdirectories that hold a performance matrix.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    if dir.join(PERF_FILE).is_file() {
        runs.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(PERF_FILE).is_file())
        .collect();
    subdirs.sort();
    runs.extend(subdirs);
    Ok(runs)
}

/// Metrics of every finished run under `dir`, written to `report.csv` and
/// `curves.csv` in `dir`. Unfinished runs are skipped with a warning.
pub fn report_dir(dir: &Path) -> Result<Vec<MetricsReport>> {
    let runs = find_runs(dir)?;
    ensure!(
        !runs.is_empty(),
        Validation,
        "no {PERF_FILE} in {} or its subdirectories",
        dir.display()
    );
    let mut reports = Vec::new();
    let mut matrices = Vec::new();
    for run in runs {
        let perf: PerfMatrix = serde_json::from_str(&fs::read_to_string(run.join(PERF_FILE))?)?;
        if !perf.is_complete() {
            log::warn!(
                "{}: {} of {} steps recorded, skipped",
                run.display(),
                perf.rows.len(),
                perf.n_tasks()
            );
            continue;
        }
        reports.push(compute_metrics(&perf)?);
        matrices.push(perf);
    }
    ensure!(!reports.is_empty(), IncompleteRun, "no finished run under {}", dir.display());
    write_report_csv(&dir.join(REPORT_FILE), &reports)?;
    write_curves_csv(&dir.join(CURVES_FILE), &matrices)?;
    Ok(reports)
}
