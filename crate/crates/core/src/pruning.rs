//! Post-task expert pruning, survival masks, reinitialization of unused
//! experts, and router fine-tuning on features replayed from stored task
//! statistics.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};
use crate::moe::{gate_with_mask, router_forward, MoeModel, RouterState};
use crate::numerics::{adam_step, gradient, softmax, AdamState, Graph, ParamSet, Tensor2, Var};
use crate::relevance::TaskStats;
use crate::synth::{derive_seed, permutation, rng_for, FrozenBackbone};

pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub steps: usize,
    pub lr: f64,
    pub patience: usize,
    pub threshold: f64,
    pub l1_weight: f64,
    /// Count how many past tasks kept each expert instead of OR-ing their masks
    /// in the L1 term.
    pub additive_history: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            patience: 50,
            threshold: DEFAULT_THRESHOLD,
            l1_weight: 1.0,
            additive_history: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneVector {
    pub e: Vec<f64>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub vector: PruneVector,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub steps: usize,
    /// False when no step improved on the starting point.
    pub improved: bool,
}

/// Fixed quantities of the prune objective for one task: each expert's
/// outputs on the task's inputs, the gates the router produced for them, and
/// the historical usage of every expert.
#[derive(Clone, Debug)]
pub struct PruneProblem {
    pub outputs: Vec<Tensor2>,
    pub weights: Tensor2,
    pub history: Vec<f64>,
}

impl PruneProblem {
    pub fn new(outputs: Vec<Tensor2>, weights: Tensor2, history: Vec<f64>) -> Result<Self> {
        let n_e = outputs.len();
        ensure!(n_e >= 1, Configuration, "at least one expert is required");
        ensure!(
            weights.cols() == n_e && history.len() == n_e,
            Dimension,
            "{} experts, gates over {}, history over {}",
            n_e,
            weights.cols(),
            history.len()
        );
        let shape = outputs[0].shape();
        ensure!(
            outputs.iter().all(|o| o.shape() == shape) && shape.0 == weights.rows(),
            Dimension,
            "expert outputs and gates disagree on the batch"
        );
        ensure!(weights.rows() > 0, Dimension, "empty prune batch");
        Ok(Self {
            outputs,
            weights,
            history,
        })
    }

    /// Gates and expert outputs of `model` on a task's inputs.
    pub fn from_model(
        model: &MoeModel,
        backbone: &FrozenBackbone,
        x_img: &Tensor2,
        x_text: &Tensor2,
        history: Vec<f64>,
    ) -> Result<Self> {
        let (_, weights) = model.translate_train(backbone, x_img, x_text)?;
        let outputs = (0..model.bank.n_experts())
            .map(|j| model.bank.expert_output(j, x_img))
            .collect::<Result<Vec<_>>>()?;
        Self::new(outputs, weights, history)
    }

    pub fn n_experts(&self) -> usize {
        self.outputs.len()
    }

    pub fn mean_weights(&self) -> Vec<f64> {
        self.weights.mean_rows().into_data()
    }

    /// `‖Σ_j (w_j − e_j)·E_j(x)‖_F / √n + l1·Σ_j |M_j + e_j|` for a `1 × N_E` variable `e`.
    pub fn objective_var(&self, g: &mut Graph, e: Var, l1_weight: f64) -> Result<Var> {
        let n = self.weights.rows();
        let w = g.leaf(self.weights.clone());
        let neg = g.scale(e, -1.0)?;
        let diff = g.add_row(w, neg)?;
        let mut resid: Option<Var> = None;
        for (j, out) in self.outputs.iter().enumerate() {
            let o = g.leaf(out.clone());
            let col = g.slice_cols(diff, j, 1)?;
            let term = g.mul_col(o, col)?;
            resid = Some(match resid {
                None => term,
                Some(r) => g.add(r, term)?,
            });
        }
        let resid = resid.expect("at least one expert");
        let sq = g.mul(resid, resid)?;
        let ss = g.sum_all(sq)?;
        let norm = g.sqrt(ss)?;
        let frob = g.scale(norm, 1.0 / (n as f64).sqrt())?;
        let m = g.leaf(Tensor2::row_vector(self.history.clone()));
        let shifted = g.add(m, e)?;
        let abs = g.abs(shifted)?;
        let l1 = g.sum_all(abs)?;
        let l1 = g.scale(l1, l1_weight)?;
        g.add(frob, l1)
    }

    pub fn objective(&self, e: &[f64], l1_weight: f64) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor2::row_vector(e.to_vec()));
        let o = self.objective_var(&mut g, v, l1_weight)?;
        Ok(g.scalar(o))
    }
}

/// Learns the surrogate gate `e` by projected Adam (`e ≥ 0`), starting from
/// the batch-mean gate weights, and returns the best iterate.
pub fn optimize_prune_vector(problem: &PruneProblem, cfg: &PruneConfig) -> Result<PruneOutcome> {
    ensure!(cfg.lr > 0.0, Configuration, "prune learning rate must be positive");
    let init = problem.mean_weights();
    let mut params = ParamSet::new().with("e", Tensor2::row_vector(init.clone()))?;
    let initial_objective = problem.objective(&init, cfg.l1_weight)?;
    let mut best = (initial_objective, init);
    let mut adam = AdamState::new();
    let mut since_best = 0;
    let mut steps = 0;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let loss = problem.objective_var(&mut g, vars["e"], cfg.l1_weight)?;
        gradient(&g, loss, &mut params, &vars)?;
        adam_step(&mut params, &mut adam, cfg.lr)?;
        let projected = params["e"].map(|v| v.max(0.0));
        params.set("e", projected)?;
        steps += 1;
        let e = params["e"].data().to_vec();
        let obj = problem.objective(&e, cfg.l1_weight)?;
        if obj < best.0 {
            best = (obj, e);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let improved = best.0 < initial_objective;
    if !improved {
        log::info!(
            "prune objective did not decrease from {initial_objective:.6} in {steps} steps; keeping the starting point"
        );
    }
    Ok(PruneOutcome {
        vector: PruneVector {
            e: best.1,
            threshold: cfg.threshold,
        },
        initial_objective,
        best_objective: best.0,
        steps,
        improved,
    })
}

/// `M^t_j = 1` iff `|e_j| ≥ threshold`. When nothing survives, the expert
/// with the largest `|e_j|` is kept and the second value is true.
pub fn threshold_mask(pv: &PruneVector) -> (Vec<bool>, bool) {
    let mask: Vec<bool> = pv.e.iter().map(|v| v.abs() >= pv.threshold).collect();
    if mask.iter().any(|m| *m) || pv.e.is_empty() {
        return (mask, false);
    }
    let mut best = 0;
    for (j, v) in pv.e.iter().enumerate() {
        if v.abs() > pv.e[best].abs() {
            best = j;
        }
    }
    log::warn!("every prune weight is below {}; keeping expert {best}", pv.threshold);
    let mut mask = vec![false; pv.e.len()];
    mask[best] = true;
    (mask, true)
}

/// Relative change of the mixture output when each row's gate is recomputed
/// over the survivors only: `‖mix(w) − mix(w|M)‖_F / ‖mix(w)‖_F`.
pub fn pruning_fidelity(
    model: &MoeModel,
    backbone: &FrozenBackbone,
    x_img: &Tensor2,
    x_text: &Tensor2,
    survivors: &[bool],
) -> Result<f64> {
    let logits = router_forward(x_img, x_text, &model.router, backbone)?;
    let k = model.config.k;
    let mut diff = 0.0;
    let mut base = 0.0;
    for r in 0..x_img.rows() {
        let full = gate_with_mask(logits.row(r), k, None)?;
        let kept = gate_with_mask(logits.row(r), k, Some(survivors))?;
        let x = x_img.row(r);
        let a = crate::moe::mixture_forward(x, &full, &model.bank)?;
        let b = crate::moe::mixture_forward(x, &kept, &model.bank)?;
        diff += a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        base += a.iter().map(|u| u * u).sum::<f64>();
    }
    ensure!(base > 0.0, DegenerateVector, "mixture output is identically zero");
    Ok((diff / base).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySet {
    pub x_img: Tensor2,
    pub x_text: Tensor2,
    pub labels: Vec<usize>,
    pub source_task: Vec<usize>,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Expert-label distribution for replayed samples of one task: a softmax over
/// its scaled activation counts with pruned experts set to `-inf`, or the
/// literal `softmax(profile ⊙ mask)` when `verbatim`.
pub fn replay_label_distribution(stats: &TaskStats, verbatim: bool) -> Result<Vec<f64>> {
    let mask = stats
        .mask
        .as_ref()
        .ok_or_else(|| MvpError::State(format!("task {} has no survival mask", stats.task_id)))?;
    let source = if verbatim { &stats.profile } else { &stats.counts };
    ensure!(
        source.len() == mask.len(),
        Dimension,
        "activation vector of {} entries with a mask of {}",
        source.len(),
        mask.len()
    );
    let logits: Vec<f64> = source
        .iter()
        .zip(mask)
        .map(|(v, m)| match (m, verbatim) {
            (true, _) => *v,
            (false, true) => 0.0,
            (false, false) => f64::NEG_INFINITY,
        })
        .collect();
    Ok(softmax(&Tensor2::row_vector(logits))?.into_data())
}

/// Draws `n_per_task` image and instruction features from each stored task's
/// Gaussians, labelled with an expert sampled from that task's label distribution.
pub fn synthesize_replay(
    stats: &[TaskStats],
    n_per_task: usize,
    verbatim_labels: bool,
    seed: u64,
) -> Result<ReplaySet> {
    ensure!(!stats.is_empty(), NoHistory, "no stored tasks to replay");
    let mut imgs = Vec::with_capacity(stats.len());
    let mut texts = Vec::with_capacity(stats.len());
    let mut labels = Vec::with_capacity(stats.len() * n_per_task);
    let mut source_task = Vec::with_capacity(stats.len() * n_per_task);
    for s in stats {
        let mut rng = rng_for(seed, &[40, s.task_id as u64]);
        imgs.push(s.cov_img.sample(&s.mu_img, n_per_task, &mut rng)?);
        texts.push(s.cov_text.sample(&s.mu_text, n_per_task, &mut rng)?);
        let probs = replay_label_distribution(s, verbatim_labels)?;
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| MvpError::DegenerateDistribution(format!("replay labels: {e}")))?;
        for _ in 0..n_per_task {
            labels.push(dist.sample(&mut rng));
            source_task.push(s.task_id);
        }
    }
    let imgs: Vec<&Tensor2> = imgs.iter().collect();
    let texts: Vec<&Tensor2> = texts.iter().collect();
    Ok(ReplaySet {
        x_img: Tensor2::vstack(&imgs)?,
        x_text: Tensor2::vstack(&texts)?,
        labels,
        source_task,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub n_per_task: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub verbatim_labels: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            n_per_task: 256,
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            verbatim_labels: false,
        }
    }
}

/// Cross-entropy fine-tuning of the router alone on replayed samples; returns
/// the mean loss of each epoch.
pub fn finetune_router(
    router: &mut RouterState,
    backbone: &FrozenBackbone,
    replay: &ReplaySet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    ensure!(!replay.is_empty(), NoHistory, "empty replay set");
    ensure!(cfg.batch_size >= 1, Configuration, "batch size must be positive");
    let n_e = router.n_experts();
    ensure!(
        replay.labels.iter().all(|&l| l < n_e),
        Dimension,
        "replay label outside {n_e} experts"
    );
    let lifted = backbone.project(&replay.x_img)?;
    let mut adam = AdamState::new();
    let mut rng = rng_for(derive_seed(seed, &[41]), &[]);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = permutation(replay.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut target = Tensor2::zeros(chunk.len(), n_e);
            for (r, &i) in chunk.iter().enumerate() {
                target.set(r, replay.labels[i], 1.0);
            }
            let mut g = Graph::new();
            let vars = router.params().bind(&mut g);
            let rv = RouterState::vars(&vars)?;
            let v = g.leaf(lifted.select_rows(chunk));
            let t = g.leaf(replay.x_text.select_rows(chunk));
            let logits = router.logits_var(&mut g, &rv, v, t)?;
            let ce = g.cross_entropy(logits, target)?;
            let loss = g.mean_all(ce)?;
            total += g.scalar(loss) * chunk.len() as f64;
            gradient(&g, loss, router.params_mut(), &vars)?;
            adam_step(router.params_mut(), &mut adam, cfg.lr)?;
        }
        losses.push(total / replay.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeConfig;
    use crate::relevance::{update_task_stats, Covariance, StatsOptions};
    use crate::synth::{gaussian_vec, BackboneDims};

    #[test]
    fn threshold_examples() {
        let pv = |e: Vec<f64>| PruneVector {
            e,
            threshold: DEFAULT_THRESHOLD,
        };
        assert_eq!(
            threshold_mask(&pv(vec![0.5, 0.0005, 0.2])),
            (vec![true, false, true], false)
        );
        assert_eq!(
            threshold_mask(&pv(vec![0.5, 0.01, 0.2])),
            (vec![true, true, true], false)
        );
        assert_eq!(
            threshold_mask(&pv(vec![0.0002, 0.0009, 0.0001])),
            (vec![false, true, false], true)
        );
    }

    fn constant_gate_problem() -> PruneProblem {
        let mut rng = rng_for(2, &[]);
        let outputs = (0..3)
            .map(|_| Tensor2::new(10, 4, gaussian_vec(&mut rng, 40)).unwrap())
            .collect();
        let weights = Tensor2::from_rows(&vec![vec![0.2, 0.5, 0.3]; 10]).unwrap();
        PruneProblem::new(outputs, weights, vec![1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn matching_e_zeroes_the_frobenius_term() {
        let p = constant_gate_problem();
        assert_eq!(p.objective(&[0.2, 0.5, 0.3], 0.0).unwrap(), 0.0);
        let out = optimize_prune_vector(
            &p,
            &PruneConfig {
                l1_weight: 0.0,
                ..PruneConfig::default()
            },
        )
        .unwrap();
        for (e, w) in out.vector.e.iter().zip([0.2, 0.5, 0.3]) {
            assert!((e - w).abs() < 1e-12);
        }
        assert!(out.best_objective < 1e-12);
    }

    #[test]
    fn per_sample_match_is_exact_zero() {
        let p = constant_gate_problem();
        let frob_only = p.objective(p.weights.row(0), 0.0).unwrap();
        assert_eq!(frob_only, 0.0);
    }

    fn tiny() -> (FrozenBackbone, MoeModel) {
        let bb = FrozenBackbone::random(
            BackboneDims {
                d_img: 4,
                d_text: 4,
                d_tok: 4,
                hidden: 6,
                n_vocab: 3,
            },
            1,
        )
        .unwrap();
        let m = MoeModel::new(
            MoeConfig {
                n_experts: 3,
                ..MoeConfig::default()
            },
            &bb,
            2,
        )
        .unwrap();
        (bb, m)
    }

    fn stats_with(mask: Vec<bool>, counts: Vec<f64>, jitter_only: bool) -> TaskStats {
        let d = 4;
        let mut rng = rng_for(9, &[]);
        let x = Tensor2::new(12, d, gaussian_vec(&mut rng, 12 * d)).unwrap();
        let mut s = update_task_stats(0, &x, &x, counts.clone(), counts, StatsOptions::default()).unwrap();
        if jitter_only {
            s.mu_img = vec![1.0, -2.0, 0.5, 3.0];
            s.cov_img = Covariance::Full(Tensor2::identity(d).scale(1e-6));
        }
        s.mask = Some(mask);
        s
    }

    #[test]
    fn single_survivor_names_every_label() {
        let s = stats_with(vec![false, true, false], vec![0.6, 0.1, 0.3], false);
        let r = synthesize_replay(&[s], 200, false, 3).unwrap();
        assert!(r.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn jitter_covariance_sample_mean() {
        let s = stats_with(vec![true, true, false], vec![0.6, 0.1, 0.3], true);
        let n = 4000;
        let r = synthesize_replay(std::slice::from_ref(&s), n, false, 3).unwrap();
        let mean = r.x_img.mean_rows();
        let bound = 4.0 * 1e-3 / (n as f64).sqrt();
        for (m, mu) in mean.data().iter().zip(&s.mu_img) {
            assert!((m - mu).abs() < bound);
        }
    }

    #[test]
    fn verbatim_labels_leak_to_pruned_experts() {
        let s = stats_with(vec![true, false, false], vec![0.9, 0.05, 0.05], false);
        let masked = replay_label_distribution(&s, false).unwrap();
        assert_eq!(masked, vec![1.0, 0.0, 0.0]);
        let literal = replay_label_distribution(&s, true).unwrap();
        assert!(literal[1] > 0.0 && literal[2] > 0.0);
    }

    #[test]
    fn zero_epochs_leave_router_unchanged() {
        let (bb, mut m) = tiny();
        let s = stats_with(vec![true, true, true], vec![0.3, 0.3, 0.4], false);
        let replay = synthesize_replay(&[s], 16, false, 1).unwrap();
        let before = m.router.clone();
        let experts = m.bank.params().fingerprint();
        finetune_router(
            &mut m.router,
            &bb,
            &replay,
            &FinetuneConfig {
                epochs: 0,
                ..FinetuneConfig::default()
            },
            4,
        )
        .unwrap();
        assert_eq!(m.router, before);
        finetune_router(&mut m.router, &bb, &replay, &FinetuneConfig::default(), 4).unwrap();
        assert_ne!(m.router, before);
        assert_eq!(m.bank.params().fingerprint(), experts);
    }
}
