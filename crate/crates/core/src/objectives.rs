//! Training losses: answer cross-entropy, the expert recommendation loss that
//! pulls routing towards semantically related past tasks, the activation-bias
//! loss that pushes it away from the aggregate history, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::moe::{Forward, MoeModel};
use crate::numerics::{Graph, Tensor2, Var};
use crate::relevance::{relevance_scores, TaskStats};
use crate::synth::{decode_var, Batch, FrozenBackbone};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_bias: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Apply the temperature only inside the normalizer of the similarity
    /// distribution instead of to every similarity.
    pub verbatim_temperature: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_bias: 1.0,
            tau: 1.0,
            alpha: 0.3,
            verbatim_temperature: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, Configuration, "τ must be positive, got {}", self.tau);
        ensure!(
            self.lambda_rec >= 0.0 && self.lambda_bias >= 0.0,
            Configuration,
            "loss weights must be nonnegative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            Configuration,
            "α = {} outside [0, 1]",
            self.alpha
        );
        Ok(())
    }
}

/// Mean cross-entropy of decoded tokens against one-hot answers.
pub fn task_ce_var(
    g: &mut Graph,
    backbone: &FrozenBackbone,
    token: Var,
    x_text: Var,
    answers: &[usize],
) -> Result<Var> {
    let dec = backbone.bind_decoder(g);
    let logits = decode_var(g, token, x_text, &dec)?;
    let n_vocab = g.value(logits).cols();
    ensure!(
        answers.iter().all(|&a| a < n_vocab),
        Dimension,
        "answer outside a vocabulary of {n_vocab}"
    );
    let mut target = Tensor2::zeros(answers.len(), n_vocab);
    for (r, &a) in answers.iter().enumerate() {
        target.set(r, a, 1.0);
    }
    let ce = g.cross_entropy(logits, target)?;
    g.mean_all(ce)
}

/// The current routing distribution: softmax of the batch-mean router logits.
pub fn routing_distribution_var(g: &mut Graph, logits: Var) -> Result<Var> {
    let m = g.mean_rows(logits)?;
    g.softmax(m)
}

/// Cosine between a `1 × m` variable and a constant vector.
fn cosine_var(g: &mut Graph, v: Var, c: &[f64]) -> Result<Var> {
    let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(cn > 0.0, DegenerateVector, "zero-norm reference distribution");
    ensure!(
        g.value(v).shape() == (1, c.len()),
        Dimension,
        "distribution of shape {:?} against {} entries",
        g.value(v).shape(),
        c.len()
    );
    let cl = g.leaf(Tensor2::row_vector(c.to_vec()));
    let prod = g.mul(v, cl)?;
    let dot = g.sum_all(prod)?;
    let sq = g.mul(v, v)?;
    let ss = g.sum_all(sq)?;
    let norm = g.sqrt(ss)?;
    let denom = g.scale(norm, cn)?;
    g.div(dot, denom)
}

/// Relevance scores of a batch against stored tasks, averaged over rows and
/// normalized to sum to one.
pub fn recommendation_target(batch: &Batch, stats: &[TaskStats], alpha: f64) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; stats.len()];
    for r in 0..batch.len() {
        let s = relevance_scores(batch.x_img.row(r), batch.x_text.row(r), stats, alpha)?;
        mean.iter_mut().zip(&s.scores).for_each(|(m, v)| *m += v);
    }
    let total: f64 = mean.iter().sum();
    ensure!(total > 0.0, DegenerateDistribution, "relevance scores sum to zero");
    Ok(mean.into_iter().map(|m| m / total).collect())
}

/// Cross-entropy between the normalized relevance target and the softmax over
/// past tasks of `cos(L̄^{t'}, L^t) / τ`. `None` without history.
pub fn recommendation_var(
    g: &mut Graph,
    target: &[f64],
    profiles: &[&[f64]],
    current: Var,
    tau: f64,
    verbatim: bool,
) -> Result<Option<Var>> {
    if profiles.is_empty() {
        return Ok(None);
    }
    ensure!(
        target.len() == profiles.len(),
        Dimension,
        "{} targets for {} past tasks",
        target.len(),
        profiles.len()
    );
    ensure!(tau > 0.0, Configuration, "τ must be positive");
    let sims = profiles
        .iter()
        .map(|p| cosine_var(g, current, p))
        .collect::<Result<Vec<_>>>()?;
    let sims = g.concat_cols(&sims)?;
    let scaled = g.scale(sims, 1.0 / tau)?;
    let loss = if verbatim {
        // log π_j = sim_j − log Σ exp(sim / τ)
        let t = g.leaf(Tensor2::row_vector(target.to_vec()));
        let prod = g.mul(sims, t)?;
        let dot = g.sum_all(prod)?;
        let lse = g.log_sum_exp(scaled)?;
        let mass: f64 = target.iter().sum();
        let lse = g.scale(lse, mass)?;
        g.sub(lse, dot)?
    } else {
        g.cross_entropy(scaled, Tensor2::row_vector(target.to_vec()))?
    };
    Ok(Some(loss))
}

/// `½(1 + cos(L̄^{1:t−1}, L^t))`.
pub fn bias_var(g: &mut Graph, history: &[f64], current: Var) -> Result<Var> {
    let c = cosine_var(g, current, history)?;
    let half = g.scale(c, 0.5)?;
    g.add_const(half, 0.5)
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Option<Var>>) -> Result<f64> {
    let mut g = Graph::new();
    Ok(build(&mut g)?.map_or(0.0, |v| g.scalar(v)))
}

/// Recommendation loss for a fixed current distribution; zero without history.
pub fn recommendation_loss(
    target: &[f64],
    profiles: &[&[f64]],
    current: &[f64],
    tau: f64,
    verbatim: bool,
) -> Result<f64> {
    eval_scalar(|g| {
        let c = g.leaf(Tensor2::row_vector(current.to_vec()));
        recommendation_var(g, target, profiles, c, tau, verbatim)
    })
}

/// Activation-bias loss; zero without history.
pub fn bias_loss(history: Option<&[f64]>, current: &[f64]) -> Result<f64> {
    eval_scalar(|g| {
        let c = g.leaf(Tensor2::row_vector(current.to_vec()));
        history.map(|h| bias_var(g, h, c)).transpose()
    })
}

/// What previous tasks contribute to the loss of the current one.
#[derive(Clone, Copy, Debug, Default)]
pub struct History<'a> {
    /// Statistics (and activation profiles) of every finished task.
    pub stats: &'a [TaskStats],
    /// Aggregate historical activation profile.
    pub aggregate: Option<&'a [f64]>,
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub forward: Forward,
    pub ce: Var,
    pub rec: Option<Var>,
    pub bias: Option<Var>,
    pub total: Var,
}

/// `L_ce + λ_rec·L_rec + λ_bias·L_bias` for one batch, on `g`.
pub fn total_loss(
    g: &mut Graph,
    model: &MoeModel,
    backbone: &FrozenBackbone,
    batch: &Batch,
    history: History<'_>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let forward = model.forward(g, backbone, &batch.x_img, &batch.x_text, None, None)?;
    let ce = task_ce_var(g, backbone, forward.token, forward.x_text, &batch.answers)?;
    let mut total = ce;
    let needs_current = !history.stats.is_empty() || history.aggregate.is_some();
    let current = if needs_current {
        Some(routing_distribution_var(g, forward.logits)?)
    } else {
        None
    };
    let mut rec = None;
    if let (Some(cur), false) = (current, history.stats.is_empty()) {
        let target = recommendation_target(batch, history.stats, cfg.alpha)?;
        let profiles: Vec<&[f64]> = history.stats.iter().map(|s| s.profile.as_slice()).collect();
        rec = recommendation_var(g, &target, &profiles, cur, cfg.tau, cfg.verbatim_temperature)?;
        if let Some(r) = rec {
            let w = g.scale(r, cfg.lambda_rec)?;
            total = g.add(total, w)?;
        }
    }
    let mut bias = None;
    if let (Some(cur), Some(h)) = (current, history.aggregate) {
        let b = bias_var(g, h, cur)?;
        let w = g.scale(b, cfg.lambda_bias)?;
        total = g.add(total, w)?;
        bias = Some(b);
    }
    Ok(LossTerms {
        forward,
        ce,
        rec,
        bias,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeConfig;
    use crate::numerics::{adam_step, gradient, AdamState, ParamSet};
    use crate::relevance::{update_task_stats, StatsOptions};
    use crate::synth::{gaussian_vec, rng_for, BackboneDims};

    #[test]
    fn recommendation_reference_values() {
        let one = [0.2, 0.5, 0.3];
        let l = recommendation_loss(&[1.0], &[&one], &[0.1, 0.1, 0.8], 1.0, false).unwrap();
        assert_eq!(l, 0.0);
        let same = [0.4, 0.6];
        let l = recommendation_loss(&[0.5, 0.5], &[&same, &same], &[0.3, 0.7], 1.0, false).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(recommendation_loss(&[], &[], &[0.5, 0.5], 1.0, false).unwrap(), 0.0);
    }

    #[test]
    fn low_temperature_concentrates_on_the_most_similar_task() {
        let near = [0.7, 0.2, 0.1];
        let far = [0.1, 0.2, 0.7];
        let cur = [0.6, 0.3, 0.1];
        let target = [0.5, 0.5];
        let sims = [
            crate::numerics::cosine(&near, &cur).unwrap(),
            crate::numerics::cosine(&far, &cur).unwrap(),
        ];
        let mut prev_p_near = 0.0;
        for tau in [1.0, 0.1, 0.01] {
            let l = recommendation_loss(&target, &[&near, &far], &cur, tau, false).unwrap();
            let z: Vec<f64> = sims.iter().map(|s| s / tau).collect();
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            let p_near = (z[0] - lse).exp();
            let want = -(0.5 * (z[0] - lse) + 0.5 * (z[1] - lse));
            assert!((l - want).abs() < 1e-9 * want.max(1.0));
            assert!(p_near > prev_p_near);
            prev_p_near = p_near;
        }
        assert!(prev_p_near > 0.999);
    }

    #[test]
    fn bias_reference_values() {
        let v = [0.2, 0.3, 0.5];
        assert!((bias_loss(Some(&v), &v).unwrap() - 1.0).abs() < 1e-12);
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        assert!((bias_loss(Some(&a), &b).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(bias_loss(None, &b).unwrap(), 0.0);
    }

    #[test]
    fn bias_descent_moves_mass_off_the_historical_expert() {
        let history = [1.0, 0.0, 0.0, 0.0];
        let mut p = ParamSet::new()
            .with("z", Tensor2::row_vector(vec![3.0, 0.0, 0.0, 0.0]))
            .unwrap();
        let mass = |p: &ParamSet| {
            crate::numerics::softmax(&p["z"]).unwrap().data()[0]
        };
        let start = mass(&p);
        let mut prev = start;
        for _ in 0..50 {
            let mut g = Graph::new();
            let v = p.bind(&mut g);
            let cur = g.softmax(v["z"]).unwrap();
            let loss = bias_var(&mut g, &history, cur).unwrap();
            gradient(&g, loss, &mut p, &v).unwrap();
            let gz = p.grad("z").unwrap().scale(-0.5);
            let z = p["z"].add(&gz).unwrap();
            p.set("z", z).unwrap();
            p.clear_grads();
            assert!(mass(&p) < prev);
            prev = mass(&p);
        }
        assert!(mass(&p) < start - 0.01, "{} -> {}", start, mass(&p));
    }

    fn fixture() -> (FrozenBackbone, MoeModel, Batch, Vec<TaskStats>) {
        let dims = BackboneDims {
            d_img: 4,
            d_text: 4,
            d_tok: 4,
            hidden: 6,
            n_vocab: 3,
        };
        let bb = FrozenBackbone::random(dims, 3).unwrap();
        let cfg = MoeConfig {
            n_experts: 3,
            k: 2,
            ..MoeConfig::default()
        };
        let m = MoeModel::new(cfg, &bb, 4).unwrap();
        let mut rng = rng_for(6, &[]);
        let batch = Batch {
            x_img: Tensor2::new(5, 4, gaussian_vec(&mut rng, 20)).unwrap(),
            x_text: Tensor2::new(5, 4, gaussian_vec(&mut rng, 20)).unwrap(),
            answers: vec![0, 2, 1, 1, 0],
            task_id: 2,
        };
        let stats = (0..2)
            .map(|t| {
                let x = Tensor2::new(8, 4, gaussian_vec(&mut rng, 32)).unwrap();
                let mut s = update_task_stats(t, &x, &x.map(|v| v + 0.5), vec![], vec![], StatsOptions::default()).unwrap();
                s.profile = vec![0.5 - 0.2 * t as f64, 0.3, 0.2 + 0.2 * t as f64];
                s
            })
            .collect();
        (bb, m, batch, stats)
    }

    #[test]
    fn total_loss_decomposes() {
        let (bb, m, batch, stats) = fixture();
        let agg = [0.4, 0.35, 0.25];
        let history = History {
            stats: &stats,
            aggregate: Some(&agg),
        };
        let mut g = Graph::new();
        let zero = LossConfig {
            lambda_rec: 0.0,
            lambda_bias: 0.0,
            ..LossConfig::default()
        };
        let t = total_loss(&mut g, &m, &bb, &batch, history, &zero).unwrap();
        assert_eq!(g.scalar(t.total), g.scalar(t.ce));

        let mut g = Graph::new();
        let t = total_loss(&mut g, &m, &bb, &batch, History::default(), &LossConfig::default()).unwrap();
        assert_eq!(g.scalar(t.total), g.scalar(t.ce));
        assert!(t.rec.is_none() && t.bias.is_none());

        let mut g = Graph::new();
        let t = total_loss(&mut g, &m, &bb, &batch, history, &LossConfig::default()).unwrap();
        let (tok, _) = m.translate_train(&bb, &batch.x_img, &batch.x_text).unwrap();
        let logits = bb.decode(&tok, &batch.x_text).unwrap();
        let ce: f64 = (0..5)
            .map(|r| {
                crate::numerics::cross_entropy(
                    logits.row(r),
                    crate::numerics::Target::Class(batch.answers[r]),
                )
                .unwrap()
            })
            .sum::<f64>()
            / 5.0;
        let router = crate::moe::router_forward(&batch.x_img, &batch.x_text, &m.router, &bb).unwrap();
        let cur = crate::numerics::softmax(&router.mean_rows()).unwrap().into_data();
        let target = recommendation_target(&batch, &stats, 0.3).unwrap();
        let profiles: Vec<&[f64]> = stats.iter().map(|s| s.profile.as_slice()).collect();
        let rec = recommendation_loss(&target, &profiles, &cur, 1.0, false).unwrap();
        let bias = bias_loss(Some(&agg), &cur).unwrap();
        assert!((g.scalar(t.total) - (ce + rec + bias)).abs() < 1e-12);
    }

    #[test]
    fn training_step_leaves_backbone_untouched() {
        let (bb, mut m, batch, stats) = fixture();
        let before = bb.fingerprint();
        let agg = [0.4, 0.35, 0.25];
        let history = History {
            stats: &stats,
            aggregate: Some(&agg),
        };
        let mut g = Graph::new();
        let t = total_loss(&mut g, &m, &bb, &batch, history, &LossConfig::default()).unwrap();
        let grads = g.backward(t.total).unwrap();
        m.router.params_mut().collect_grads(&grads, &t.forward.router_vars).unwrap();
        m.bank.params_mut().collect_grads(&grads, &t.forward.expert_vars).unwrap();
        let mut adam = AdamState::new();
        adam_step(m.router.params_mut(), &mut adam, 0.01).unwrap();
        assert_eq!(bb.fingerprint(), before);
    }
}
