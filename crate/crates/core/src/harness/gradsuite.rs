//! Randomized finite-difference checks of every training objective.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::moe::{MoeConfig, MoeModel};
use crate::numerics::{central_difference, finite_diff_check, relative_error, FdReport, Graph, ParamSet, ParamVars, Tensor2, Var};
use crate::objectives::{
    bias_var, recommendation_var, routing_distribution_var, total_loss, History, LossConfig,
};
use crate::pruning::PruneProblem;
use crate::relevance::{update_task_stats, StatsOptions, TaskStats};
use crate::synth::{derive_seed, gaussian_vec, rng_for, BackboneDims, Batch, FrozenBackbone};
use rand::Rng;

pub const OBJECTIVES: [&str; 5] = ["task_ce", "recommendation", "bias", "total", "prune"];
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub objective: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<(usize, String, usize)>,
}

impl SuiteEntry {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

struct Fixture {
    seed: u64,
    backbone: FrozenBackbone,
    model: MoeModel,
    batch: Batch,
    stats: Vec<TaskStats>,
    aggregate: Vec<f64>,
}

const N_EXPERTS: usize = 4;

/// Smallest gap between the last selected and the first unselected logit
/// that a fixture must keep, so that no finite-difference probe crosses a
/// change of the top-K selection.
const MIN_GATE_MARGIN: f64 = 0.05;

fn gate_margin(fx: &Fixture) -> Result<f64> {
    let k = fx.model.config.k;
    let gates = fx.model.gates(&fx.backbone, &fx.batch.x_img, &fx.batch.x_text, None)?;
    Ok(gates
        .iter()
        .map(|g| {
            let mut z = g.logits.clone();
            z.sort_by(|a, b| b.total_cmp(a));
            z[k - 1] - z[k]
        })
        .fold(f64::INFINITY, f64::min))
}

/// First fixture drawn from `seed`'s sub-streams whose gates are clear of ties.
fn fixture(seed: u64) -> Result<Fixture> {
    for attempt in 0.. {
        let fx = draw_fixture(derive_seed(seed, &[attempt]))?;
        if gate_margin(&fx)? >= MIN_GATE_MARGIN {
            return Ok(fx);
        }
    }
    unreachable!()
}

fn draw_fixture(seed: u64) -> Result<Fixture> {
    let d = 4;
    let dims = BackboneDims {
        d_img: d,
        d_text: d,
        d_tok: d,
        hidden: 6,
        n_vocab: 5,
    };
    let backbone = FrozenBackbone::random(dims, derive_seed(seed, &[1]))?;
    let cfg = MoeConfig {
        n_experts: N_EXPERTS,
        k: 2,
        heads: 2,
        ..MoeConfig::default()
    };
    let mut model = MoeModel::new(cfg, &backbone, derive_seed(seed, &[2]))?;
    let mut rng = rng_for(seed, &[3]);
    let names: Vec<String> = model.bank.params().names().map(str::to_string).collect();
    for name in names {
        let p = model.bank.params()[name.as_str()].clone();
        let noise = gaussian_vec(&mut rng, p.len());
        let moved = Tensor2::new(p.rows(), p.cols(), p.data().iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect())?;
        model.bank.params_mut().set(&name, moved)?;
    }
    let n = 6;
    let batch = Batch {
        x_img: Tensor2::new(n, d, gaussian_vec(&mut rng, n * d))?,
        x_text: Tensor2::new(n, d, gaussian_vec(&mut rng, n * d))?,
        answers: (0..n).map(|_| rng.gen_range(0..5)).collect(),
        task_id: 2,
    };
    let stats = (0..2)
        .map(|t| {
            let m = 10;
            let xi = Tensor2::new(m, d, gaussian_vec(&mut rng, m * d))?;
            let xt = Tensor2::new(m, d, gaussian_vec(&mut rng, m * d))?;
            let profile = random_simplex(&mut rng, N_EXPERTS);
            update_task_stats(t, &xi, &xt, profile.clone(), profile, StatsOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = random_simplex(&mut rng, N_EXPERTS);
    Ok(Fixture {
        seed,
        backbone,
        model,
        batch,
        stats,
        aggregate,
    })
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Central differences over every router and expert parameter of `template`
/// against the tape gradient of the loss built by `build`.
fn check_model<F>(template: &MoeModel, h: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &MoeModel) -> Result<(Var, ParamVars, ParamVars)>,
{
    let mut g = Graph::new();
    let (loss, rv, ev) = build(&mut g, template)?;
    let grads = g.backward(loss)?;
    let eval = |m: &MoeModel| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _, _) = build(&mut g, m)?;
        Ok(g.scalar(loss))
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for router_side in [true, false] {
        let vars = if router_side { &rv } else { &ev };
        for (name, var) in vars.iter() {
            let analytic = grads.get(var)?;
            let original = if router_side {
                template.router.params()[name].clone()
            } else {
                template.bank.params()[name].clone()
            };
            for i in 0..original.len() {
                let numeric = central_difference(h, |shift| {
                    let mut m = template.clone();
                    let mut moved = original.clone();
                    moved.data_mut()[i] += shift;
                    if router_side {
                        m.router.params_mut().set(name, moved)?;
                    } else {
                        m.bank.params_mut().set(name, moved)?;
                    }
                    eval(&m)
                })?;
                let rel = relative_error(analytic.data()[i], numeric);
                report.coordinates += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.to_string(), i));
                }
            }
        }
    }
    Ok(report)
}

fn check_objective(name: &str, fx: &Fixture, h: f64) -> Result<FdReport> {
    let loss_cfg = LossConfig::default();
    match name {
        "task_ce" | "total" => {
            let total = name == "total";
            check_model(&fx.model, h, |g, m| {
                let history = if total {
                    History {
                        stats: &fx.stats,
                        aggregate: Some(&fx.aggregate),
                    }
                } else {
                    History::default()
                };
                let terms = total_loss(g, m, &fx.backbone, &fx.batch, history, &loss_cfg)?;
                let loss = if total { terms.total } else { terms.ce };
                Ok((loss, terms.forward.router_vars, terms.forward.expert_vars))
            })
        }
        "recommendation" | "bias" => {
            let mut rng = rng_for(fx.seed, &[4, name.len() as u64]);
            let z = Tensor2::new(3, N_EXPERTS, gaussian_vec(&mut rng, 3 * N_EXPERTS))?;
            let params = ParamSet::new().with("z", z)?;
            let target = random_simplex(&mut rng, fx.stats.len());
            let profiles: Vec<&[f64]> = fx.stats.iter().map(|s| s.profile.as_slice()).collect();
            let is_rec = name == "recommendation";
            finite_diff_check(&params, h, |g, vars| {
                let logits = vars["z"];
                let current = routing_distribution_var(g, logits)?;
                if is_rec {
                    Ok(recommendation_var(g, &target, &profiles, current, loss_cfg.tau, false)?
                        .expect("history is present"))
                } else {
                    bias_var(g, &fx.aggregate, current)
                }
            })
        }
        "prune" => {
            let problem = PruneProblem::from_model(
                &fx.model,
                &fx.backbone,
                &fx.batch.x_img,
                &fx.batch.x_text,
                vec![1.0, 0.0, 1.0, 0.0],
            )?;
            let mut rng = rng_for(fx.seed, &[5]);
            let e: Vec<f64> = (0..N_EXPERTS).map(|_| rng.gen_range(0.1..0.9)).collect();
            let params = ParamSet::new().with("e", Tensor2::row_vector(e))?;
            finite_diff_check(&params, h, |g, vars| problem.objective_var(g, vars["e"], 1.0))
        }
        other => Err(crate::error::MvpError::Configuration(format!("unknown objective {other:?}"))),
    }
}

/// Runs `trials` randomized checks of each objective.
pub fn gradient_suite(trials: usize, seed: u64, h: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = OBJECTIVES
        .iter()
        .map(|o| SuiteEntry {
            objective: o.to_string(),
            trials,
            coordinates: 0,
            max_rel_error: 0.0,
            worst: None,
        })
        .collect();
    for trial in 0..trials {
        let fx = fixture(derive_seed(seed, &[trial as u64]))?;
        for entry in entries.iter_mut() {
            let r = check_objective(&entry.objective, &fx, h)?;
            entry.coordinates += r.coordinates;
            if entry.worst.is_none() || r.max_rel_error > entry.max_rel_error {
                entry.max_rel_error = r.max_rel_error;
                entry.worst = r.worst.map(|(n, i)| (trial, n, i));
            }
        }
    }
    Ok(entries)
}
