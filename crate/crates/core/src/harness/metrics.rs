use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};

/// `rows[t][j]`: accuracy of task `j` after finishing step `t`, plus the
/// metadata needed to rebuild the report from this file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfMatrix {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    /// Family of every task.
    pub families: Vec<usize>,
    /// Accuracy of the untouched backbone on every task.
    pub zero_shot: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl PerfMatrix {
    pub fn new(strategy: &str, seed: u64, config_hash: &str, families: Vec<usize>, zero_shot: Vec<f64>) -> Self {
        Self {
            strategy: strategy.into(),
            seed,
            config_hash: config_hash.into(),
            families,
            zero_shot,
            rows: Vec::new(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.families.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n_tasks()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        ensure!(
            row.len() == self.n_tasks(),
            Dimension,
            "row of {} accuracies for {} tasks",
            row.len(),
            self.n_tasks()
        );
        ensure!(
            row.iter().all(|a| (0.0..=1.0).contains(a)),
            Validation,
            "accuracy outside [0, 1]"
        );
        ensure!(!self.is_complete(), State, "performance matrix is already full");
        self.rows.push(row);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub family: usize,
    pub last: f64,
    pub avg: f64,
    /// Mean accuracy before the task was learned; `None` for the first task.
    pub transfer: Option<f64>,
    /// Accuracy right after learning the task (`P[j][j]`).
    pub just_learned: f64,
    pub zero_shot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub family: usize,
    pub tasks: Vec<usize>,
    pub last: f64,
    pub avg: f64,
    pub transfer: Option<f64>,
    pub just_learned: f64,
    pub zero_shot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_tasks: usize,
    pub tasks: Vec<TaskMetrics>,
    pub families: Vec<FamilyMetrics>,
    pub mean_last: f64,
    pub mean_avg: f64,
    pub mean_transfer: Option<f64>,
    /// Mean over `t < j` of `P[t][j] − zero_shot[j]`.
    pub transfer_gap: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = xs.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| mean(&present))
}

/// Last, Avg and Transfer per task and per family from a full matrix.
pub fn compute_metrics(p: &PerfMatrix) -> Result<MetricsReport> {
    let n = p.n_tasks();
    ensure!(n > 0, IncompleteRun, "no tasks");
    if !p.is_complete() {
        return Err(MvpError::IncompleteRun(format!(
            "{} of {} steps recorded",
            p.rows.len(),
            n
        )));
    }
    ensure!(
        p.zero_shot.len() == n && p.rows.iter().all(|r| r.len() == n),
        Dimension,
        "performance matrix is not {n} × {n}"
    );
    let tasks: Vec<TaskMetrics> = (0..n)
        .map(|j| {
            let column: Vec<f64> = p.rows.iter().map(|r| r[j]).collect();
            TaskMetrics {
                task: j,
                family: p.families[j],
                last: column[n - 1],
                avg: mean(&column),
                transfer: (j > 0).then(|| mean(&column[..j])),
                just_learned: column[j],
                zero_shot: p.zero_shot[j],
            }
        })
        .collect();
    let mut family_ids: Vec<usize> = p.families.clone();
    family_ids.sort_unstable();
    family_ids.dedup();
    let families = family_ids
        .into_iter()
        .map(|f| {
            let members: Vec<&TaskMetrics> = tasks.iter().filter(|t| t.family == f).collect();
            let pick = |g: fn(&TaskMetrics) -> f64| mean(&members.iter().map(|t| g(t)).collect::<Vec<_>>());
            FamilyMetrics {
                family: f,
                tasks: members.iter().map(|t| t.task).collect(),
                last: pick(|t| t.last),
                avg: pick(|t| t.avg),
                transfer: mean_opt(&members.iter().map(|t| t.transfer).collect::<Vec<_>>()),
                just_learned: pick(|t| t.just_learned),
                zero_shot: pick(|t| t.zero_shot),
            }
        })
        .collect();
    let gaps: Vec<f64> = (1..n)
        .flat_map(|j| (0..j).map(move |t| (t, j)))
        .map(|(t, j)| p.rows[t][j] - p.zero_shot[j])
        .collect();
    Ok(MetricsReport {
        strategy: p.strategy.clone(),
        seed: p.seed,
        config_hash: p.config_hash.clone(),
        n_tasks: n,
        mean_last: mean(&tasks.iter().map(|t| t.last).collect::<Vec<_>>()),
        mean_avg: mean(&tasks.iter().map(|t| t.avg).collect::<Vec<_>>()),
        mean_transfer: mean_opt(&tasks.iter().map(|t| t.transfer).collect::<Vec<_>>()),
        transfer_gap: (!gaps.is_empty()).then(|| mean(&gaps)),
        tasks,
        families,
    })
}
