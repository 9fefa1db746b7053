//! Expert projectors, the instruction-conditioned router, top-K gating and
//! the residual mixture with the pre-trained projector.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};
use crate::numerics::{
    attention_block_var, init_attention_params, softmax, AttentionVars, Graph, ParamSet, ParamVars,
    Tensor2, Var,
};
use crate::synth::{rng_for, FrozenBackbone};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub k: usize,
    pub heads: usize,
    /// Average the pre-trained token with the mixture as `(V + Σ w·E) / 2`
    /// instead of dividing by `K + 1`.
    pub renormalize_residual: bool,
    /// Divide activation counts by the number of recordings before the softmax.
    pub scaled_counts: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            k: 2,
            heads: 2,
            renormalize_residual: false,
            scaled_counts: true,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_experts >= 1, Configuration, "at least one expert is required");
        ensure!(
            self.k >= 1 && self.k <= self.n_experts,
            Configuration,
            "K = {} must lie in [1, {}]",
            self.k,
            self.n_experts
        );
        ensure!(self.heads >= 1, Configuration, "at least one attention head is required");
        Ok(())
    }

    /// Weight of the mixture in the residual denominator `λ·k + 1`.
    pub(crate) fn residual_k(&self) -> f64 {
        if self.renormalize_residual {
            1.0
        } else {
            self.k as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
    pub logits: Vec<f64>,
}

/// Indices of the `k` largest logits among the allowed ones, in descending
/// order; ties go to the lowest index. Fewer than `k` are returned when fewer
/// experts are allowed.
pub fn top_k_indices(logits: &[f64], k: usize, allowed: Option<&[bool]>) -> Result<Vec<usize>> {
    ensure!(
        k >= 1 && k <= logits.len(),
        Configuration,
        "K = {k} with {} experts",
        logits.len()
    );
    if let Some(a) = allowed {
        ensure!(
            a.len() == logits.len(),
            Dimension,
            "mask of {} entries for {} experts",
            a.len(),
            logits.len()
        );
    }
    let mut idx: Vec<usize> = (0..logits.len())
        .filter(|&j| allowed.is_none_or(|a| a[j]))
        .collect();
    ensure!(!idx.is_empty(), Configuration, "no expert is routable");
    // Stable sort keeps the lower index first among equal logits.
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Softmax over the `k` largest logits, zero elsewhere.
pub fn top_k_gate(logits: &[f64], k: usize) -> Result<GateVector> {
    gate_with_mask(logits, k, None)
}

pub(crate) fn gate_with_mask(logits: &[f64], k: usize, allowed: Option<&[bool]>) -> Result<GateVector> {
    ensure!(
        logits.iter().all(|v| v.is_finite()),
        Validation,
        "router logits must be finite"
    );
    let selected = top_k_indices(logits, k, allowed)?;
    let mut masked = vec![f64::NEG_INFINITY; logits.len()];
    for &j in &selected {
        masked[j] = logits[j];
    }
    let weights = softmax(&Tensor2::row_vector(masked))?.into_data();
    Ok(GateVector {
        weights,
        selected,
        logits: logits.to_vec(),
    })
}

/// `1` where a row's top-K selection keeps the expert, `0` elsewhere.
pub fn top_k_keep(logits: &Tensor2, k: usize, allowed: Option<&[bool]>) -> Result<Tensor2> {
    let mut keep = Tensor2::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        for j in top_k_indices(logits.row(r), k, allowed)? {
            keep.set(r, j, 1.0);
        }
    }
    Ok(keep)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub counts: Vec<f64>,
    pub recordings: u64,
    pub closed: bool,
}

/// The expert projectors, a copy of the pre-trained projector they start
/// from, the cumulative survival mask and per-task activation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    n_experts: usize,
    experts: ParamSet,
    pretrained: ParamSet,
    cumulative_mask: Vec<bool>,
    #[serde(with = "keyed_records")]
    activations: BTreeMap<usize, ActivationRecord>,
    scaled_counts: bool,
}

/// Stores the per-task records as `[task, record]` pairs: integer map keys do
/// not survive the buffering that tagged enums around the bank go through.
mod keyed_records {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::ActivationRecord;

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, ActivationRecord>, s: S) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, ActivationRecord>, D::Error> {
        Ok(Vec::<(usize, ActivationRecord)>::deserialize(d)?.into_iter().collect())
    }
}

pub(crate) fn expert_names(j: usize) -> (String, String) {
    (format!("e{j:03}.w"), format!("e{j:03}.b"))
}

impl ExpertBank {
    /// Every expert starts as an exact copy of `pretrained` (params `w`, `b`).
    pub fn new(n_experts: usize, pretrained: &ParamSet, scaled_counts: bool) -> Result<Self> {
        ensure!(n_experts >= 1, Configuration, "at least one expert is required");
        let (w, b) = pretrained_pair(pretrained)?;
        let mut experts = ParamSet::new();
        for j in 0..n_experts {
            let (wn, bn) = expert_names(j);
            experts.insert(wn, w.clone())?;
            experts.insert(bn, b.clone())?;
        }
        Ok(Self {
            n_experts,
            experts,
            pretrained: pretrained.clone(),
            cumulative_mask: vec![false; n_experts],
            activations: BTreeMap::new(),
            scaled_counts,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn params(&self) -> &ParamSet {
        &self.experts
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.experts
    }

    pub fn pretrained(&self) -> &ParamSet {
        &self.pretrained
    }

    pub fn expert(&self, j: usize) -> (&Tensor2, &Tensor2) {
        let (w, b) = expert_names(j);
        (&self.experts[&w as &str], &self.experts[&b as &str])
    }

    /// `E_j(x)` for every row of `x`.
    pub fn expert_output(&self, j: usize, x: &Tensor2) -> Result<Tensor2> {
        let (w, b) = self.expert(j);
        crate::numerics::affine(x, w, b)
    }

    pub fn cumulative_mask(&self) -> &[bool] {
        &self.cumulative_mask
    }

    /// `M^{1:t} = M^{1:t-1} OR M^t`.
    pub fn merge_mask(&mut self, task_mask: &[bool]) -> Result<()> {
        ensure!(
            task_mask.len() == self.n_experts,
            Dimension,
            "mask of {} entries for {} experts",
            task_mask.len(),
            self.n_experts
        );
        for (c, m) in self.cumulative_mask.iter_mut().zip(task_mask) {
            *c |= *m;
        }
        Ok(())
    }

    /// Adds each row of `weights` (gate weights, zeros included) to the
    /// counts of `task_id`.
    pub fn record_activation(&mut self, weights: &Tensor2, task_id: usize) -> Result<()> {
        ensure!(
            weights.cols() == self.n_experts,
            Dimension,
            "{} gate weights for {} experts",
            weights.cols(),
            self.n_experts
        );
        let n = self.n_experts;
        let rec = self.activations.entry(task_id).or_insert_with(|| ActivationRecord {
            counts: vec![0.0; n],
            ..ActivationRecord::default()
        });
        ensure!(
            !rec.closed,
            State,
            "task {task_id} is finished; its activations are final"
        );
        for r in 0..weights.rows() {
            for (c, w) in rec.counts.iter_mut().zip(weights.row(r)) {
                *c += w;
            }
            rec.recordings += 1;
        }
        Ok(())
    }

    pub fn close_task(&mut self, task_id: usize) {
        let n = self.n_experts;
        self.activations
            .entry(task_id)
            .or_insert_with(|| ActivationRecord {
                counts: vec![0.0; n],
                ..ActivationRecord::default()
            })
            .closed = true;
    }

    pub fn activation_counts(&self, task_id: usize) -> Vec<f64> {
        self.activations
            .get(&task_id)
            .map_or_else(|| vec![0.0; self.n_experts], |r| r.counts.clone())
    }

    fn scaled(&self, task_id: usize) -> Result<Vec<f64>> {
        let rec = self
            .activations
            .get(&task_id)
            .filter(|r| r.recordings > 0)
            .ok_or_else(|| MvpError::State(format!("task {task_id} has no recorded activations")))?;
        let div = if self.scaled_counts {
            rec.recordings as f64
        } else {
            1.0
        };
        Ok(rec.counts.iter().map(|c| c / div).collect())
    }

    /// Normalized counts of `task_id`; their softmax is the activation profile.
    pub fn scaled_counts(&self, task_id: usize) -> Result<Vec<f64>> {
        self.scaled(task_id)
    }

    /// Softmax of the (scaled) activation counts of a task.
    pub fn activation_profile(&self, task_id: usize) -> Result<Vec<f64>> {
        Ok(softmax(&Tensor2::row_vector(self.scaled(task_id)?))?.into_data())
    }

    /// Softmax of the summed (scaled) counts of every recorded task before `task_id`.
    pub fn aggregate_history(&self, task_id: usize) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.n_experts];
        let mut any = false;
        for (&t, rec) in self.activations.range(..task_id) {
            if rec.recordings == 0 {
                continue;
            }
            any = true;
            for (s, c) in sum.iter_mut().zip(self.scaled(t)?) {
                *s += c;
            }
        }
        ensure!(any, NoHistory, "no task before {task_id} has recorded activations");
        Ok(softmax(&Tensor2::row_vector(sum))?.into_data())
    }

    /// Resets every expert outside the cumulative mask to the pre-trained
    /// projector and returns their indices.
    pub fn reinit_unused(&mut self) -> Result<Vec<usize>> {
        let (w, b) = pretrained_pair(&self.pretrained)?;
        let (w, b) = (w.clone(), b.clone());
        let mut reset = Vec::new();
        for j in 0..self.n_experts {
            if !self.cumulative_mask[j] {
                let (wn, bn) = expert_names(j);
                self.experts.set(&wn, w.clone())?;
                self.experts.set(&bn, b.clone())?;
                reset.push(j);
            }
        }
        Ok(reset)
    }
}

fn pretrained_pair(p: &ParamSet) -> Result<(&Tensor2, &Tensor2)> {
    match (p.get("w"), p.get("b")) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(MvpError::Configuration(
            "pre-trained projector needs parameters `w` and `b`".into(),
        )),
    }
}

/// Router parameters: slot offsets for the image and instruction tokens, an
/// attention block and a linear head to one logit per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    params: ParamSet,
    n_experts: usize,
    k: usize,
    heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pos_img: Var,
    pos_text: Var,
    attn: AttentionVars,
    head_w: Var,
    head_b: Var,
}

impl RouterState {
    pub fn new(d_tok: usize, cfg: &MoeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        ensure!(
            d_tok.is_multiple_of(cfg.heads),
            Configuration,
            "{} heads do not divide width {d_tok}",
            cfg.heads
        );
        let mut rng = rng_for(seed, &[30]);
        let mut params = ParamSet::new();
        let mut gauss = |r: usize, c: usize, s: f64| {
            let data = (0..r * c)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor2::new(r, c, data)
        };
        params.insert("pos_img", gauss(1, d_tok, 0.1)?)?;
        params.insert("pos_text", gauss(1, d_tok, 0.1)?)?;
        params.insert("head.w", gauss(d_tok, cfg.n_experts, 1.0 / (d_tok as f64).sqrt())?)?;
        params.insert("head.b", Tensor2::zeros(1, cfg.n_experts))?;
        init_attention_params(&mut params, "attn.", d_tok, &mut rng_for(seed, &[31]))?;
        Ok(Self {
            params,
            n_experts: cfg.n_experts,
            k: cfg.k,
            heads: cfg.heads,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_tok(&self) -> usize {
        self.params["pos_img"].cols()
    }

    pub fn vars(vars: &ParamVars) -> Result<RouterVars> {
        let get = |n: &str| {
            vars.get(n)
                .ok_or_else(|| MvpError::Configuration(format!("missing router parameter {n}")))
        };
        Ok(RouterVars {
            pos_img: get("pos_img")?,
            pos_text: get("pos_text")?,
            attn: AttentionVars::from_vars(vars, "attn.")?,
            head_w: get("head.w")?,
            head_b: get("head.b")?,
        })
    }

    /// Logits for rows of lifted image tokens `V(x_img)` and instruction embeddings.
    pub fn logits_var(&self, g: &mut Graph, rv: &RouterVars, v_img: Var, x_text: Var) -> Result<Var> {
        let (n, d) = g.value(v_img).shape();
        let (nt, dt) = g.value(x_text).shape();
        ensure!(
            n == nt && d == self.d_tok() && dt == self.d_tok(),
            Dimension,
            "router expects two {}-wide tokens per row, got {:?} and {:?}",
            self.d_tok(),
            (n, d),
            (nt, dt)
        );
        let v_img = rms_rows(g, v_img)?;
        let x_text = rms_rows(g, x_text)?;
        let img = g.add_row(v_img, rv.pos_img)?;
        let txt = g.add_row(x_text, rv.pos_text)?;
        let seq = g.stack_seq(&[img, txt])?;
        let h = attention_block_var(g, seq, &rv.attn, 2, self.heads)?;
        let pooled = g.group_mean(h, 2)?;
        g.affine(pooled, rv.head_w, rv.head_b)
    }
}

/// Scales every row to unit root-mean-square.
fn rms_rows(g: &mut Graph, a: Var) -> Result<Var> {
    let (n, d) = g.value(a).shape();
    let sq = g.mul(a, a)?;
    let ss = g.sum_cols(sq)?;
    let ms = g.scale(ss, 1.0 / d as f64)?;
    let ms = g.add_const(ms, 1e-12)?;
    let rms = g.sqrt(ms)?;
    let ones = g.leaf(Tensor2::filled(n, 1, 1.0));
    let inv = g.div(ones, rms)?;
    g.mul_col(a, inv)
}

/// Router logits `R(x_img, x_text)` for every row.
pub fn router_forward(
    x_img: &Tensor2,
    x_text: &Tensor2,
    router: &RouterState,
    backbone: &FrozenBackbone,
) -> Result<Tensor2> {
    let mut g = Graph::new();
    let vars = router.params.bind(&mut g);
    let rv = RouterState::vars(&vars)?;
    let v = g.leaf(backbone.project(x_img)?);
    let t = g.leaf(x_text.clone());
    let out = router.logits_var(&mut g, &rv, v, t)?;
    Ok(g.value(out).clone())
}

/// Router, experts and the settings that tie them together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: MoeConfig,
    pub router: RouterState,
    pub bank: ExpertBank,
}

/// Everything a forward pass left on the graph.
#[derive(Clone, Debug)]
pub struct Forward {
    pub router_vars: ParamVars,
    pub expert_vars: ParamVars,
    pub v_tok: Var,
    pub x_text: Var,
    pub logits: Var,
    pub weights: Var,
    pub mixture: Var,
    pub token: Var,
}

impl MoeModel {
    pub fn new(cfg: MoeConfig, backbone: &FrozenBackbone, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let router = RouterState::new(backbone.dims.d_tok, &cfg, seed)?;
        let bank = ExpertBank::new(cfg.n_experts, &backbone.projector, cfg.scaled_counts)?;
        Ok(Self {
            config: cfg,
            router,
            bank,
        })
    }

    /// Builds the full forward pass on `g`.
    ///
    /// With `lambda = None` the token is the training-time residual average
    /// `(V + Σ w·E) / (K + 1)`; with a per-row `λ` it is
    /// `(V + λ·Σ w·E) / (λ·K + 1)`. Experts outside `allowed` never enter
    /// the top-K.
    pub fn forward(
        &self,
        g: &mut Graph,
        backbone: &FrozenBackbone,
        x_img: &Tensor2,
        x_text: &Tensor2,
        allowed: Option<&[bool]>,
        lambda: Option<&[f64]>,
    ) -> Result<Forward> {
        ensure!(
            x_img.rows() == x_text.rows(),
            Dimension,
            "{} images for {} instructions",
            x_img.rows(),
            x_text.rows()
        );
        let router_vars = self.router.params.bind(g);
        let expert_vars = self.bank.experts.bind(g);
        let rv = RouterState::vars(&router_vars)?;
        let x = g.leaf(x_img.clone());
        let pv = backbone.bind_projector(g);
        let v_tok = g.affine(x, pv.w, pv.b)?;
        let text = g.leaf(x_text.clone());
        let logits = self.router.logits_var(g, &rv, v_tok, text)?;
        let keep = top_k_keep(g.value(logits), self.config.k, allowed)?;
        let masked = g.mask_fill(logits, &keep)?;
        let weights = g.softmax(masked)?;
        let mixture = self.mixture_var(g, &expert_vars, x, weights, &keep)?;
        let token = match lambda {
            None => {
                let sum = g.add(v_tok, mixture)?;
                g.scale(sum, 1.0 / (self.config.residual_k() + 1.0))?
            }
            Some(lam) => {
                ensure!(
                    lam.len() == x_img.rows(),
                    Dimension,
                    "{} aggregation weights for {} rows",
                    lam.len(),
                    x_img.rows()
                );
                let kk = self.config.residual_k();
                let lam_col = g.leaf(Tensor2::column_vector(lam.to_vec()));
                let inv = g.leaf(Tensor2::column_vector(
                    lam.iter().map(|l| 1.0 / (l * kk + 1.0)).collect(),
                ));
                let weighted = g.mul_col(mixture, lam_col)?;
                let sum = g.add(v_tok, weighted)?;
                g.mul_col(sum, inv)?
            }
        };
        Ok(Forward {
            router_vars,
            expert_vars,
            v_tok,
            x_text: text,
            logits,
            weights,
            mixture,
            token,
        })
    }

    /// `Σ_j w_j E_j(x)` on the graph; experts no row selected are skipped.
    fn mixture_var(
        &self,
        g: &mut Graph,
        ev: &ParamVars,
        x: Var,
        weights: Var,
        keep: &Tensor2,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for j in 0..self.bank.n_experts {
            if (0..keep.rows()).all(|r| keep.get(r, j) == 0.0) {
                continue;
            }
            let (wn, bn) = expert_names(j);
            let out = g.affine(x, ev[&wn as &str], ev[&bn as &str])?;
            let col = g.slice_cols(weights, j, 1)?;
            let term = g.mul_col(out, col)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        acc.ok_or_else(|| MvpError::State("no expert selected".into()))
    }

    /// Gates for every row, restricted to `allowed` experts.
    pub fn gates(
        &self,
        backbone: &FrozenBackbone,
        x_img: &Tensor2,
        x_text: &Tensor2,
        allowed: Option<&[bool]>,
    ) -> Result<Vec<GateVector>> {
        let logits = router_forward(x_img, x_text, &self.router, backbone)?;
        (0..logits.rows())
            .map(|r| gate_with_mask(logits.row(r), self.config.k, allowed))
            .collect()
    }

    /// Training-time tokens `(V + Σ w·E) / (K + 1)` and the gates used.
    pub fn translate_train(
        &self,
        backbone: &FrozenBackbone,
        x_img: &Tensor2,
        x_text: &Tensor2,
    ) -> Result<(Tensor2, Tensor2)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, backbone, x_img, x_text, None, None)?;
        Ok((g.value(f.token).clone(), g.value(f.weights).clone()))
    }

    /// Inference-time tokens `(V + λ·Σ w·E) / (λ·K + 1)` with one `λ` per row.
    pub fn aggregate_inference(
        &self,
        backbone: &FrozenBackbone,
        x_img: &Tensor2,
        x_text: &Tensor2,
        lambda: &[f64],
        allowed: Option<&[bool]>,
    ) -> Result<Tensor2> {
        ensure!(
            lambda.iter().all(|l| (0.0..=1.0).contains(l)),
            Validation,
            "aggregation weights must lie in [0, 1]"
        );
        let mut g = Graph::new();
        let f = self.forward(&mut g, backbone, x_img, x_text, allowed, Some(lambda))?;
        Ok(g.value(f.token).clone())
    }
}

/// `Σ_j w_j E_j(x)` for one input, skipping zero-weight experts.
pub fn mixture_forward(x_img: &[f64], gate: &GateVector, bank: &ExpertBank) -> Result<Vec<f64>> {
    ensure!(
        gate.weights.len() == bank.n_experts,
        Dimension,
        "gate over {} experts for a bank of {}",
        gate.weights.len(),
        bank.n_experts
    );
    let x = Tensor2::row_vector(x_img.to_vec());
    let mut out: Option<Vec<f64>> = None;
    for (j, &w) in gate.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let e = bank.expert_output(j, &x)?;
        let acc = out.get_or_insert_with(|| vec![0.0; e.cols()]);
        for (a, v) in acc.iter_mut().zip(e.data()) {
            *a += w * v;
        }
    }
    out.ok_or_else(|| MvpError::Validation("gate has no nonzero weight".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::synth::{gaussian_vec, BackboneDims};

    fn dims() -> BackboneDims {
        BackboneDims {
            d_img: 6,
            d_text: 4,
            d_tok: 4,
            hidden: 8,
            n_vocab: 5,
        }
    }

    fn setup(n_experts: usize, k: usize) -> (FrozenBackbone, MoeModel) {
        let bb = FrozenBackbone::random(dims(), 2).unwrap();
        let cfg = MoeConfig {
            n_experts,
            k,
            ..MoeConfig::default()
        };
        let m = MoeModel::new(cfg, &bb, 5).unwrap();
        (bb, m)
    }

    fn inputs(n: usize, seed: u64) -> (Tensor2, Tensor2) {
        let mut rng = rng_for(seed, &[]);
        (
            Tensor2::new(n, 6, gaussian_vec(&mut rng, n * 6)).unwrap(),
            Tensor2::new(n, 4, gaussian_vec(&mut rng, n * 4)).unwrap(),
        )
    }

    #[test]
    fn top_k_reference_values() {
        let g = top_k_gate(&[2.0, 1.0, 0.0, 0.0], 2).unwrap();
        let want = [0.731059, 0.268941, 0.0, 0.0];
        for (a, b) in g.weights.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(g.selected, vec![0, 1]);
    }

    #[test]
    fn ties_select_lowest_indices() {
        let g = top_k_gate(&[0.3; 5], 2).unwrap();
        assert_eq!(g.selected, vec![0, 1]);
        assert_eq!(g.weights, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_k_is_plain_softmax() {
        let logits = [0.4, -1.2, 2.2, 0.0];
        let g = top_k_gate(&logits, 4).unwrap();
        let s = softmax(&Tensor2::row_vector(logits.to_vec())).unwrap();
        assert_eq!(g.weights, s.into_data());
    }

    #[test]
    fn k_above_expert_count_is_rejected() {
        assert!(matches!(
            top_k_gate(&[1.0, 2.0], 3),
            Err(MvpError::Configuration(_))
        ));
    }

    #[test]
    fn masked_experts_are_never_selected() {
        let allowed = [false, true, false, true];
        let g = gate_with_mask(&[5.0, 1.0, 4.0, 0.5], 2, Some(&allowed)).unwrap();
        assert_eq!(g.selected, vec![1, 3]);
        let single = gate_with_mask(&[5.0, 1.0, 4.0, 0.5], 2, Some(&[false, false, true, false])).unwrap();
        assert_eq!(single.weights, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn experts_start_as_copies_of_v() {
        let (bb, m) = setup(3, 2);
        for j in 0..3 {
            let (w, b) = m.bank.expert(j);
            assert_eq!(w, &bb.projector["w"]);
            assert_eq!(b, &bb.projector["b"]);
        }
    }

    #[test]
    fn one_hot_gate_gives_that_expert() {
        let (_, mut m) = setup(3, 1);
        let w = m.bank.params()["e001.w"].map(|v| v * 1.5);
        m.bank.params_mut().set("e001.w", w).unwrap();
        let x = vec![0.1, -0.2, 0.3, 0.7, -1.0, 0.5];
        let gate = top_k_gate(&[0.0, 3.0, 1.0], 1).unwrap();
        let out = mixture_forward(&x, &gate, &m.bank).unwrap();
        let direct = m.bank.expert_output(1, &Tensor2::row_vector(x)).unwrap();
        assert_eq!(out, direct.into_data());
    }

    #[test]
    fn mixture_matches_dense_sum() {
        let (_, mut m) = setup(4, 3);
        let mut rng = rng_for(3, &[]);
        for j in 0..4 {
            let (wn, _) = expert_names(j);
            let w = Tensor2::new(6, 4, gaussian_vec(&mut rng, 24)).unwrap();
            m.bank.params_mut().set(&wn, w).unwrap();
        }
        let x = gaussian_vec(&mut rng, 6);
        let gate = top_k_gate(&gaussian_vec(&mut rng, 4), 3).unwrap();
        let fast = mixture_forward(&x, &gate, &m.bank).unwrap();
        let mut dense = vec![0.0; 4];
        for j in 0..4 {
            let (w, b) = m.bank.expert(j);
            for c in 0..4 {
                let mut v = b.get(0, c);
                for (i, xi) in x.iter().enumerate() {
                    v += xi * w.get(i, c);
                }
                dense[c] += gate.weights[j] * v;
            }
        }
        for (a, b) in fast.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn initial_translation_is_scaled_v() {
        let (bb, m) = setup(4, 2);
        let (x, t) = inputs(5, 8);
        let (tok, _) = m.translate_train(&bb, &x, &t).unwrap();
        let v = bb.project(&x).unwrap();
        for (a, b) in tok.data().iter().zip(v.data()) {
            assert!((a - 2.0 / 3.0 * b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn one_expert_residual_is_half_sum() {
        let (bb, mut m) = setup(2, 1);
        let w = m.bank.params()["e000.w"].map(|v| v - 0.25);
        m.bank.params_mut().set("e000.w", w).unwrap();
        let (x, t) = inputs(3, 4);
        let (tok, weights) = m.translate_train(&bb, &x, &t).unwrap();
        let v = bb.project(&x).unwrap();
        for r in 0..3 {
            let j = if weights.get(r, 0) == 1.0 { 0 } else { 1 };
            let e = m.bank.expert_output(j, &x.row_tensor(r)).unwrap();
            for c in 0..4 {
                let want = 0.5 * (v.get(r, c) + e.get(0, c));
                assert!((tok.get(r, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inference_endpoints() {
        let (bb, mut m) = setup(4, 2);
        let w = m.bank.params()["e002.w"].map(|v| v * 0.5 + 0.1);
        m.bank.params_mut().set("e002.w", w).unwrap();
        let (x, t) = inputs(6, 9);
        let at_zero = m.aggregate_inference(&bb, &x, &t, &[0.0; 6], None).unwrap();
        assert_eq!(at_zero, bb.project(&x).unwrap());
        let at_one = m.aggregate_inference(&bb, &x, &t, &[1.0; 6], None).unwrap();
        let (train, _) = m.translate_train(&bb, &x, &t).unwrap();
        let bits = |t: &Tensor2| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&at_one), bits(&train));
    }

    #[test]
    fn half_lambda_at_init() {
        let (bb, m) = setup(4, 2);
        let (x, t) = inputs(2, 1);
        let out = m.aggregate_inference(&bb, &x, &t, &[0.5, 0.5], None).unwrap();
        let v = bb.project(&x).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - 0.75 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn router_is_order_sensitive_and_head_bias_shows_through() {
        let bb = FrozenBackbone::random(
            BackboneDims {
                d_text: 4,
                d_img: 4,
                ..dims()
            },
            1,
        )
        .unwrap();
        let cfg = MoeConfig {
            n_experts: 3,
            ..MoeConfig::default()
        };
        let mut r = RouterState::new(4, &cfg, 7).unwrap();
        let a = Tensor2::row_vector(vec![0.5, -1.0, 0.2, 0.9]);
        let b = Tensor2::row_vector(vec![-0.3, 0.4, 1.1, 0.0]);
        // Swap the roles: the lifted image token of `b` becomes the text slot.
        let fwd = router_forward(&a, &b, &r, &bb).unwrap();
        let va = bb.project(&a).unwrap();
        let vb = bb.project(&b).unwrap();
        let mut g = Graph::new();
        let vars = r.params().bind(&mut g);
        let rv = RouterState::vars(&vars).unwrap();
        let (l1, l2) = (g.leaf(va.clone()), g.leaf(b.clone()));
        let straight = r.logits_var(&mut g, &rv, l1, l2).unwrap();
        let (l3, l4) = (g.leaf(b.clone()), g.leaf(va));
        let swapped = r.logits_var(&mut g, &rv, l3, l4).unwrap();
        assert_eq!(g.value(straight), &fwd);
        assert_ne!(g.value(straight), g.value(swapped));
        let _ = vb;

        r.params_mut().set("head.w", Tensor2::zeros(4, 3)).unwrap();
        r.params_mut()
            .set("head.b", Tensor2::row_vector(vec![0.1, -0.2, 0.3]))
            .unwrap();
        let out = router_forward(&a, &b, &r, &bb).unwrap();
        assert_eq!(out.data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn router_text_width_must_match() {
        let (bb, m) = setup(3, 2);
        let err = router_forward(&Tensor2::zeros(1, 6), &Tensor2::zeros(1, 3), &m.router, &bb);
        assert!(matches!(err, Err(MvpError::Dimension(_))));
    }

    #[test]
    fn router_gradient_matches_finite_differences() {
        let (bb, m) = setup(3, 2);
        let (x, t) = inputs(3, 12);
        let v = bb.project(&x).unwrap();
        let mut rng = rng_for(77, &[]);
        let probe = Tensor2::new(3, 3, gaussian_vec(&mut rng, 9)).unwrap();
        let r = finite_diff_check(m.router.params(), 1e-5, |g, vars| {
            let rv = RouterState::vars(vars)?;
            let (a, b) = (g.leaf(v.clone()), g.leaf(t.clone()));
            let logits = m.router.logits_var(g, &rv, a, b)?;
            let p = g.leaf(probe.clone());
            let prod = g.mul(logits, p)?;
            let s = g.tanh(prod)?;
            g.sum_all(s)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn activation_counting() {
        let (_, mut m) = setup(4, 2);
        assert_eq!(m.bank.activation_counts(0), vec![0.0; 4]);
        let one_hot = |j: usize| {
            let mut t = Tensor2::zeros(1, 4);
            t.set(0, j, 1.0);
            t
        };
        m.bank.record_activation(&one_hot(0), 0).unwrap();
        m.bank.record_activation(&one_hot(1), 0).unwrap();
        assert_eq!(m.bank.activation_counts(0), vec![1.0, 1.0, 0.0, 0.0]);

        let w = Tensor2::row_vector(vec![0.7, 0.3, 0.0, 0.0]);
        for _ in 0..1000 {
            m.bank.record_activation(&w, 1).unwrap();
        }
        let c = m.bank.activation_counts(1);
        assert!((c[0] - 700.0).abs() < 1e-9 && (c[1] - 300.0).abs() < 1e-9);
        m.bank.close_task(1);
        assert!(matches!(
            m.bank.record_activation(&w, 1),
            Err(MvpError::State(_))
        ));
    }

    #[test]
    fn profiles_and_history() {
        let bb = FrozenBackbone::random(dims(), 2).unwrap();
        let mut raw = ExpertBank::new(4, &bb.projector, false).unwrap();
        assert!(matches!(raw.activation_profile(0), Err(MvpError::State(_))));
        let w = Tensor2::row_vector(vec![0.7, 0.3, 0.0, 0.0]);
        for _ in 0..1000 {
            raw.record_activation(&w, 0).unwrap();
        }
        let p = raw.activation_profile(0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(raw.aggregate_history(1).unwrap(), p);
        assert!(matches!(raw.aggregate_history(0), Err(MvpError::NoHistory(_))));

        let mut scaled = ExpertBank::new(4, &bb.projector, true).unwrap();
        let uniform = Tensor2::row_vector(vec![0.25; 4]);
        scaled.record_activation(&uniform, 0).unwrap();
        let p = scaled.activation_profile(0).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let mut two = ExpertBank::new(3, &bb.projector, true).unwrap();
        two.record_activation(&Tensor2::row_vector(vec![1.0, 0.0, 0.0]), 0).unwrap();
        two.record_activation(&Tensor2::row_vector(vec![0.0, 1.0, 0.0]), 1).unwrap();
        let h = two.aggregate_history(2).unwrap();
        assert_eq!(h[0], h[1]);
        assert!(h[2] < h[0]);
    }

    #[test]
    fn reinit_touches_only_unmasked_experts() {
        let (bb, mut m) = setup(4, 2);
        for j in 0..4 {
            let (wn, _) = expert_names(j);
            let w = m.bank.params()[&wn as &str].map(|v| v + j as f64 + 1.0);
            m.bank.params_mut().set(&wn, w).unwrap();
        }
        m.bank.merge_mask(&[true, false, true, false]).unwrap();
        let before = m.bank.clone();
        let reset = m.bank.reinit_unused().unwrap();
        assert_eq!(reset, vec![1, 3]);
        for j in 0..4 {
            let (w, b) = m.bank.expert(j);
            if reset.contains(&j) {
                assert_eq!(w, &bb.projector["w"]);
                assert_eq!(b, &bb.projector["b"]);
            } else {
                assert_eq!((w, b), before.expert(j));
            }
        }
    }
}
