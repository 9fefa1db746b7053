use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{RunConfig, Strategy};
use super::metrics::PerfMatrix;
use crate::error::{ensure, MvpError, Result};
use crate::moe::MoeModel;
use crate::numerics::{adam_step, AdamState, Graph, ParamSet};
use crate::objectives::{task_ce_var, total_loss, History};
use crate::pruning::{
    finetune_router, optimize_prune_vector, pruning_fidelity, synthesize_replay, threshold_mask,
    PruneProblem,
};
use crate::relevance::{lambda_batch, update_task_stats, TaskStats};
use crate::synth::{
    accuracy, argmax_rows, derive_seed, make_pretrain_mixture, make_task_stream, permutation,
    pretrain_backbone, rng_for, sample_batch, Batch, FrozenBackbone, TaskSpec,
};

/// One line of `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub task: usize,
    pub phase: String,
    pub kind: String,
    pub data: Value,
}

impl Event {
    fn new(task: usize, phase: &str, kind: &str, data: Value) -> Self {
        Self {
            task,
            phase: phase.into(),
            kind: kind.into(),
            data,
        }
    }
}

/// Expert model plus the statistics of every finished task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvpState {
    pub model: MoeModel,
    pub stats: Vec<TaskStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Learner {
    Mvp(MvpState),
    /// One trainable copy of the pre-trained projector (`w`, `b`).
    SharedProjector { projector: ParamSet },
    ZeroShot,
}

impl Learner {
    pub fn new(cfg: &RunConfig, backbone: &FrozenBackbone) -> Result<Self> {
        Ok(match cfg.strategy {
            Strategy::Mvp => Learner::Mvp(MvpState {
                model: MoeModel::new(cfg.moe.clone(), backbone, derive_seed(cfg.seed, &[12]))?,
                stats: Vec::new(),
            }),
            Strategy::SharedProjector => Learner::SharedProjector {
                projector: backbone.projector.clone(),
            },
            Strategy::ZeroShot => Learner::ZeroShot,
        })
    }
}

pub(crate) fn train_seed(seed: u64) -> u64 {
    derive_seed(seed, &[50])
}

pub(crate) fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[60])
}

/// Everything a run carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub backbone: FrozenBackbone,
    pub tasks: Vec<TaskSpec>,
    pub learner: Learner,
    pub perf: PerfMatrix,
}

impl RunState {
    /// Builds the stream, pre-trains the backbone and scores it zero-shot.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let stream_seed = derive_seed(config.seed, &[10]);
        let tasks = make_task_stream(&config.stream, stream_seed)?;
        let mixture = make_pretrain_mixture(&config.stream, stream_seed)?;
        let backbone = pretrain_backbone(
            &mixture,
            config.backbone_dims(),
            &config.pretrain,
            derive_seed(config.seed, &[11]),
        )?;
        let learner = Learner::new(&config, &backbone)?;
        let zero_shot = tasks
            .iter()
            .map(|t| {
                let b = sample_batch(t, config.train.eval_samples, eval_seed(config.seed));
                decode_accuracy(&backbone, &backbone.project(&b.x_img)?, &b)
            })
            .collect::<Result<Vec<_>>>()?;
        let perf = PerfMatrix::new(
            config.strategy.as_str(),
            config.seed,
            &config.hash(),
            tasks.iter().map(|t| t.family_id).collect(),
            zero_shot,
        );
        Ok(Self {
            config,
            backbone,
            tasks,
            learner,
            perf,
        })
    }

    pub fn completed(&self) -> usize {
        self.perf.rows.len()
    }

    pub fn is_finished(&self) -> bool {
        self.perf.is_complete()
    }

    /// Learns the next task, then evaluates every task on the frozen result.
    pub fn step(&mut self, events: &mut Vec<Event>) -> Result<()> {
        ensure!(!self.is_finished(), State, "every task has been learned");
        let t = self.completed();
        let task = self.tasks[t].clone();
        let batch = sample_batch(&task, self.config.train.train_samples, train_seed(self.config.seed));
        match &mut self.learner {
            Learner::Mvp(state) => run_task(&self.config, &self.backbone, state, &batch, events)?,
            Learner::SharedProjector { projector } => {
                train_shared(&self.config, &self.backbone, projector, &batch, events)
                    .map_err(|e| e.in_phase("a"))?;
            }
            Learner::ZeroShot => {}
        }
        let row = (0..self.tasks.len())
            .map(|j| self.evaluate(j))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_phase("eval"))?;
        events.push(Event::new(t, "eval", "accuracy", json!({ "row": row })));
        self.perf.push_row(row)
    }

    /// Accuracy of the current snapshot on the fixed evaluation batch of task `j`.
    pub fn evaluate(&self, j: usize) -> Result<f64> {
        let task = self.tasks.get(j).ok_or_else(|| {
            MvpError::Validation(format!("task {j} outside a stream of {}", self.tasks.len()))
        })?;
        let b = sample_batch(task, self.config.train.eval_samples, eval_seed(self.config.seed));
        evaluate_batch(&self.config, &self.backbone, &self.learner, &b)
    }
}

fn decode_accuracy(backbone: &FrozenBackbone, tokens: &crate::numerics::Tensor2, b: &Batch) -> Result<f64> {
    let logits = backbone.decode(tokens, &b.x_text)?;
    Ok(accuracy(&argmax_rows(&logits), &b.answers))
}

/// Exact-match accuracy of `learner` on `b`.
pub fn evaluate_batch(cfg: &RunConfig, backbone: &FrozenBackbone, learner: &Learner, b: &Batch) -> Result<f64> {
    let tokens = match learner {
        Learner::ZeroShot => backbone.project(&b.x_img)?,
        Learner::SharedProjector { projector } => {
            crate::numerics::affine(&b.x_img, &projector["w"], &projector["b"])?
        }
        Learner::Mvp(state) if state.stats.is_empty() => backbone.project(&b.x_img)?,
        Learner::Mvp(state) => {
            let lambda = lambda_batch(&b.x_img, &b.x_text, &state.stats, cfg.loss.alpha)?;
            let allowed = state.model.bank.cumulative_mask().to_vec();
            state
                .model
                .aggregate_inference(backbone, &b.x_img, &b.x_text, &lambda, Some(&allowed))?
        }
    };
    decode_accuracy(backbone, &tokens, b)
}

/// Phases (a) to (d) for one task of the expert model.
pub fn run_task(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    state: &mut MvpState,
    batch: &Batch,
    events: &mut Vec<Event>,
) -> Result<()> {
    let t = batch.task_id;
    ensure!(
        state.stats.len() == t && state.stats.iter().enumerate().all(|(i, s)| s.task_id == i),
        State,
        "task {t} requested after {} finished tasks",
        state.stats.len()
    );
    train_experts(cfg, backbone, state, batch, events).map_err(|e| e.in_phase("a"))?;
    collect_stats(cfg, state, batch, events).map_err(|e| e.in_phase("b"))?;
    prune(cfg, backbone, state, batch, events).map_err(|e| e.in_phase("c"))?;
    finetune(cfg, backbone, state, t, events).map_err(|e| e.in_phase("d"))?;
    Ok(())
}

fn train_experts(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    state: &mut MvpState,
    batch: &Batch,
    events: &mut Vec<Event>,
) -> Result<()> {
    let t = batch.task_id;
    let aggregate = if t > 0 {
        Some(state.model.bank.aggregate_history(t)?)
    } else {
        None
    };
    let mut router_adam = AdamState::new();
    let mut expert_adam = AdamState::new();
    let mut rng = rng_for(cfg.seed, &[51, t as u64]);
    for epoch in 0..cfg.train.epochs {
        let order = permutation(batch.len(), &mut rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.train.batch_size) {
            let mb = batch.select(chunk);
            let mut g = Graph::new();
            let history = History {
                stats: &state.stats,
                aggregate: aggregate.as_deref(),
            };
            let terms = total_loss(&mut g, &state.model, backbone, &mb, history, &cfg.loss)?;
            let grads = g.backward(terms.total)?;
            let model = &mut state.model;
            model.router.params_mut().collect_grads(&grads, &terms.forward.router_vars)?;
            model.bank.params_mut().collect_grads(&grads, &terms.forward.expert_vars)?;
            adam_step(model.router.params_mut(), &mut router_adam, cfg.train.lr_router)?;
            adam_step(model.bank.params_mut(), &mut expert_adam, cfg.train.lr_experts)?;
            model.bank.record_activation(g.value(terms.forward.weights), t)?;
            let w = mb.len() as f64;
            sums[0] += g.scalar(terms.ce) * w;
            sums[1] += terms.rec.map_or(0.0, |v| g.scalar(v)) * w;
            sums[2] += terms.bias.map_or(0.0, |v| g.scalar(v)) * w;
            sums[3] += g.scalar(terms.total) * w;
        }
        let n = batch.len() as f64;
        events.push(Event::new(
            t,
            "a",
            "epoch",
            json!({
                "epoch": epoch,
                "ce": sums[0] / n,
                "rec": sums[1] / n,
                "bias": sums[2] / n,
                "total": sums[3] / n,
            }),
        ));
    }
    state.model.bank.close_task(t);
    Ok(())
}

fn collect_stats(cfg: &RunConfig, state: &mut MvpState, batch: &Batch, events: &mut Vec<Event>) -> Result<()> {
    let t = batch.task_id;
    let bank = &state.model.bank;
    let stats = update_task_stats(
        t,
        &batch.x_img,
        &batch.x_text,
        bank.scaled_counts(t)?,
        bank.activation_profile(t)?,
        cfg.stats,
    )?;
    events.push(Event::new(t, "b", "stats", json!({ "profile": stats.profile })));
    state.stats.push(stats);
    Ok(())
}

fn prune(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    state: &mut MvpState,
    batch: &Batch,
    events: &mut Vec<Event>,
) -> Result<()> {
    let t = batch.task_id;
    let n_e = state.model.bank.n_experts();
    let history: Vec<f64> = if cfg.prune.additive_history {
        let mut h = vec![0.0; n_e];
        for s in &state.stats[..t] {
            for (acc, m) in h.iter_mut().zip(s.mask.iter().flatten()) {
                *acc += f64::from(u8::from(*m));
            }
        }
        h
    } else {
        state
            .model
            .bank
            .cumulative_mask()
            .iter()
            .map(|&m| f64::from(u8::from(m)))
            .collect()
    };
    let problem = PruneProblem::from_model(&state.model, backbone, &batch.x_img, &batch.x_text, history)?;
    let outcome = optimize_prune_vector(&problem, &cfg.prune)?;
    let (mask, fallback) = threshold_mask(&outcome.vector);
    let fidelity = pruning_fidelity(&state.model, backbone, &batch.x_img, &batch.x_text, &mask)?;
    state.model.bank.merge_mask(&mask)?;
    let reset = state.model.bank.reinit_unused()?;
    state.stats[t].mask = Some(mask.clone());
    events.push(Event::new(
        t,
        "c",
        "prune",
        json!({
            "e": outcome.vector.e,
            "initial_objective": outcome.initial_objective,
            "best_objective": outcome.best_objective,
            "steps": outcome.steps,
            "improved": outcome.improved,
            "mask": mask,
            "fallback": fallback,
            "fidelity": fidelity,
            "cumulative_mask": state.model.bank.cumulative_mask(),
            "reinitialized": reset,
        }),
    ));
    Ok(())
}

fn finetune(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    state: &mut MvpState,
    t: usize,
    events: &mut Vec<Event>,
) -> Result<()> {
    let replay = synthesize_replay(
        &state.stats,
        cfg.finetune.n_per_task,
        cfg.finetune.verbatim_labels,
        derive_seed(cfg.seed, &[70, t as u64]),
    )?;
    let losses = finetune_router(
        &mut state.model.router,
        backbone,
        &replay,
        &cfg.finetune,
        derive_seed(cfg.seed, &[71, t as u64]),
    )?;
    events.push(Event::new(
        t,
        "d",
        "finetune",
        json!({ "replay": replay.len(), "epoch_loss": losses }),
    ));
    Ok(())
}

/// Cross-entropy training of the single projector copy.
fn train_shared(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    projector: &mut ParamSet,
    batch: &Batch,
    events: &mut Vec<Event>,
) -> Result<()> {
    let t = batch.task_id;
    let mut adam = AdamState::new();
    let mut rng = rng_for(cfg.seed, &[51, t as u64]);
    for epoch in 0..cfg.train.epochs {
        let order = permutation(batch.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let mb = batch.select(chunk);
            let mut g = Graph::new();
            let vars = projector.bind(&mut g);
            let x = g.leaf(mb.x_img.clone());
            let text = g.leaf(mb.x_text.clone());
            let tok = g.affine(x, vars["w"], vars["b"])?;
            let ce = task_ce_var(&mut g, backbone, tok, text, &mb.answers)?;
            sum += g.scalar(ce) * mb.len() as f64;
            crate::numerics::gradient(&g, ce, projector, &vars)?;
            adam_step(projector, &mut adam, cfg.train.lr_shared)?;
        }
        events.push(Event::new(
            t,
            "a",
            "epoch",
            json!({ "epoch": epoch, "ce": sum / batch.len() as f64 }),
        ));
    }
    Ok(())
}
