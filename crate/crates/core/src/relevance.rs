//! Stored per-task feature statistics, semantic relevance of a query to each
//! stored task, and the inference-time aggregation weight derived from it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};
use crate::moe::MoeModel;
use crate::numerics::{cosine, sigmoid, Tensor2};
use crate::synth::FrozenBackbone;

pub const DEFAULT_JITTER: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Covariance {
    Full(Tensor2),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(t) => t.rows(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> Tensor2 {
        match self {
            Covariance::Full(t) => t.clone(),
            Covariance::Diagonal(d) => {
                let mut t = Tensor2::zeros(d.len(), d.len());
                for (i, v) in d.iter().enumerate() {
                    t.set(i, i, *v);
                }
                t
            }
        }
    }

    /// Lower-triangular `L` with `L·Lᵀ = Σ`.
    pub fn cholesky(&self) -> Result<Tensor2> {
        match self {
            Covariance::Diagonal(d) => {
                ensure!(
                    d.iter().all(|v| *v > 0.0),
                    Statistics,
                    "diagonal covariance has a non-positive entry"
                );
                Covariance::Full(self.to_dense()).cholesky()
            }
            Covariance::Full(a) => {
                let n = a.rows();
                let mut l = Tensor2::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        let mut s = a.get(i, j);
                        for k in 0..j {
                            s -= l.get(i, k) * l.get(j, k);
                        }
                        if i == j {
                            ensure!(
                                s > 0.0,
                                Statistics,
                                "covariance is not positive definite (pivot {s:e} at {i})"
                            );
                            l.set(i, i, s.sqrt());
                        } else {
                            l.set(i, j, s / l.get(j, j));
                        }
                    }
                }
                Ok(l)
            }
        }
    }

    /// `n` draws from `N(mean, Σ)` as rows.
    pub fn sample<R: Rng>(&self, mean: &[f64], n: usize, rng: &mut R) -> Result<Tensor2> {
        let d = mean.len();
        ensure!(
            d == self.dim(),
            Dimension,
            "mean of width {d} for a {}-dimensional covariance",
            self.dim()
        );
        let l = self.cholesky()?;
        let mut out = Tensor2::zeros(n, d);
        let mut z = vec![0.0; d];
        for r in 0..n {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let row = out.row_mut(r);
            for i in 0..d {
                let mut acc = mean[i];
                for (k, zk) in z.iter().enumerate().take(i + 1) {
                    acc += l.get(i, k) * zk;
                }
                row[i] = acc;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: usize,
    pub mu_img: Vec<f64>,
    pub mu_text: Vec<f64>,
    pub cov_img: Covariance,
    pub cov_text: Covariance,
    /// Activation profile over experts.
    pub profile: Vec<f64>,
    /// Scaled activation counts the profile was computed from.
    pub counts: Vec<f64>,
    /// Experts that survived pruning for this task.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsOptions {
    pub jitter: f64,
    pub diagonal: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            jitter: DEFAULT_JITTER,
            diagonal: false,
        }
    }
}

fn mean_and_cov(x: &Tensor2, opts: StatsOptions) -> Result<(Vec<f64>, Covariance)> {
    let (n, d) = x.shape();
    ensure!(
        n > d,
        Statistics,
        "{n} samples cannot estimate a {d}-dimensional covariance (need at least {})",
        d + 1
    );
    let mu = x.mean_rows().into_data();
    let mut centered = x.clone();
    for r in 0..n {
        centered
            .row_mut(r)
            .iter_mut()
            .zip(&mu)
            .for_each(|(v, m)| *v -= m);
    }
    let denom = (n - 1) as f64;
    let cov = if opts.diagonal {
        Covariance::Diagonal(
            (0..d)
                .map(|j| {
                    (0..n).map(|r| centered.get(r, j).powi(2)).sum::<f64>() / denom + opts.jitter
                })
                .collect(),
        )
    } else {
        let mut c = centered.t_matmul(&centered)?.scale(1.0 / denom);
        for i in 0..d {
            for j in 0..i {
                // Exact symmetry regardless of summation order.
                let v = 0.5 * (c.get(i, j) + c.get(j, i));
                c.set(i, j, v);
                c.set(j, i, v);
            }
            c.set(i, i, c.get(i, i) + opts.jitter);
        }
        Covariance::Full(c)
    };
    Ok((mu, cov))
}

/// Sample mean and jittered covariance of a task's images and instructions.
pub fn update_task_stats(
    task_id: usize,
    x_img: &Tensor2,
    x_text: &Tensor2,
    counts: Vec<f64>,
    profile: Vec<f64>,
    opts: StatsOptions,
) -> Result<TaskStats> {
    let (mu_img, cov_img) = mean_and_cov(x_img, opts)?;
    let (mu_text, cov_text) = mean_and_cov(x_text, opts)?;
    Ok(TaskStats {
        task_id,
        mu_img,
        mu_text,
        cov_img,
        cov_text,
        profile,
        counts,
        mask: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub scores: Vec<f64>,
    pub s_img: Vec<f64>,
    pub s_text: Vec<f64>,
}

/// `s = α·σ(cos(x_img, μ_img)) + (1 − α)·σ(cos(x_text, μ_text))` per stored task.
pub fn relevance_scores(
    x_img: &[f64],
    x_text: &[f64],
    stats: &[TaskStats],
    alpha: f64,
) -> Result<RelevanceScores> {
    ensure!(
        (0.0..=1.0).contains(&alpha),
        Configuration,
        "α = {alpha} outside [0, 1]"
    );
    ensure!(!stats.is_empty(), NoHistory, "no stored task statistics");
    let mut out = RelevanceScores {
        scores: Vec::with_capacity(stats.len()),
        s_img: Vec::with_capacity(stats.len()),
        s_text: Vec::with_capacity(stats.len()),
    };
    for s in stats {
        let ci = cosine(x_img, &s.mu_img)?;
        let ct = cosine(x_text, &s.mu_text)?;
        out.s_img.push(ci);
        out.s_text.push(ct);
        out.scores
            .push(alpha * sigmoid(ci) + (1.0 - alpha) * sigmoid(ct));
    }
    Ok(out)
}

/// The largest relevance score.
pub fn lambda_inf(scores: &RelevanceScores) -> Result<f64> {
    scores
        .scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| MvpError::NoHistory("no relevance scores".into()))
}

/// Per-row `λ_inf` for a batch of queries.
pub fn lambda_batch(
    x_img: &Tensor2,
    x_text: &Tensor2,
    stats: &[TaskStats],
    alpha: f64,
) -> Result<Vec<f64>> {
    (0..x_img.rows())
        .map(|r| lambda_inf(&relevance_scores(x_img.row(r), x_text.row(r), stats, alpha)?))
        .collect()
}

/// `(V(x) + λ·Σ w·E(x)) / (λ·K + 1)` for every row.
pub fn aggregate_inference(
    model: &MoeModel,
    backbone: &FrozenBackbone,
    x_img: &Tensor2,
    x_text: &Tensor2,
    lambda: &[f64],
    allowed: Option<&[bool]>,
) -> Result<Tensor2> {
    model.aggregate_inference(backbone, x_img, x_text, lambda, allowed)
}
