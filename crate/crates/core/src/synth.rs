//! Synthetic stand-in for a frozen vision-language model: task streams,
//! sampled batches, a pre-trained projector and a frozen decoder head.
//!
//! Every task is a triplet generator. Image features are Gaussian around a
//! task center; instruction embeddings sit near a family anchor so tasks of
//! one family share nearly identical instructions; the answer is the label
//! plane with the largest response to the image offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};
use crate::numerics::{adam_step, dot, AdamState, Graph, ParamSet, ParamVars, Tensor2, Var};

pub type FeatureVec = Vec<f64>;

pub const BACKBONE_FORMAT_VERSION: u32 = 1;
pub const STREAM_FORMAT_VERSION: u32 = 1;

/// Mixes a base seed with a path of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x6d76_705f_7365_6564);
    for t in tags {
        h = splitmix(h ^ splitmix(*t));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha8 stream for a derived seed.
pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// `n` independent standard normal draws.
pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    ensure!(n > 0.0, Generation, "zero vector during generation");
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn angle(u: &[f64], v: &[f64]) -> f64 {
    let c = dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt());
    c.clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub n_families: usize,
    pub tasks_per_family: usize,
    /// Tasks per family reserved for pre-training the backbone.
    pub pretrain_tasks_per_family: usize,
    pub d_img: usize,
    pub d_text: usize,
    pub n_classes: usize,
    pub image_center_norm: f64,
    pub image_spread: f64,
    pub text_norm: f64,
    pub text_jitter: f64,
    /// Max angle between instruction centers of one family, in degrees.
    pub theta_same_deg: f64,
    /// Min angle between instruction centers of different families, in degrees.
    pub theta_diff_deg: f64,
    /// Weight of the family answer rule in each stream task's label planes;
    /// 0 gives every task an independent rule. Pre-training tasks always
    /// get independent rules.
    pub label_share: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_families: 2,
            tasks_per_family: 4,
            pretrain_tasks_per_family: 2,
            d_img: 32,
            d_text: 32,
            n_classes: 4,
            image_center_norm: 4.0,
            image_spread: 0.5,
            text_norm: 1.0,
            text_jitter: 0.05,
            theta_same_deg: 20.0,
            theta_diff_deg: 60.0,
            label_share: 0.0,
        }
    }
}

impl StreamConfig {
    pub fn n_tasks(&self) -> usize {
        self.n_families * self.tasks_per_family
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family_id: usize,
    pub image_center: FeatureVec,
    pub image_spread: f64,
    pub text_center: FeatureVec,
    pub text_jitter: f64,
    pub n_classes: usize,
    /// One direction per class; the answer is the plane with the largest
    /// inner product with the image offset.
    pub label_planes: Vec<FeatureVec>,
}

impl TaskSpec {
    /// Answer for an image feature under this task's rule; ties go to the lowest class.
    pub fn answer(&self, x_img: &[f64]) -> usize {
        let offset: Vec<f64> = x_img
            .iter()
            .zip(&self.image_center)
            .map(|(x, c)| x - c)
            .collect();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, plane) in self.label_planes.iter().enumerate() {
            let s = dot(plane, &offset);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_img: Tensor2,
    pub x_text: Tensor2,
    pub answers: Vec<usize>,
    pub task_id: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x_img: self.x_img.select_rows(idx),
            x_text: self.x_text.select_rows(idx),
            answers: idx.iter().map(|&i| self.answers[i]).collect(),
            task_id: self.task_id,
        }
    }

    /// One-hot answer targets over `n_vocab` tokens.
    pub fn one_hot(&self, n_vocab: usize) -> Tensor2 {
        let mut t = Tensor2::zeros(self.len(), n_vocab);
        for (r, &a) in self.answers.iter().enumerate() {
            t.set(r, a, 1.0);
        }
        t
    }
}

fn family_anchors(cfg: &StreamConfig, seed: u64) -> Result<Vec<FeatureVec>> {
    ensure!(
        cfg.n_families >= 1 && cfg.n_families <= cfg.d_text,
        Generation,
        "{} families cannot have separated anchors in {} dimensions",
        cfg.n_families,
        cfg.d_text
    );
    let mut rng = rng_for(seed, &[1]);
    let mut anchors: Vec<FeatureVec> = Vec::with_capacity(cfg.n_families);
    while anchors.len() < cfg.n_families {
        let mut v = gaussian_vec(&mut rng, cfg.d_text);
        for a in &anchors {
            let p = dot(&v, a);
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v).sqrt() > 1e-6 {
            normalize(&mut v)?;
            anchors.push(v);
        }
    }
    Ok(anchors)
}

/// A direction at angle `phi` from `anchor`, rotated towards a random
/// orthogonal direction.
fn tilt<R: Rng>(anchor: &[f64], phi: f64, rng: &mut R) -> Result<FeatureVec> {
    let mut u = gaussian_vec(rng, anchor.len());
    let p = dot(&u, anchor);
    u.iter_mut().zip(anchor).for_each(|(x, a)| *x -= p * a);
    if anchor.len() == 1 || dot(&u, &u) < 1e-18 {
        return Ok(anchor.to_vec());
    }
    normalize(&mut u)?;
    Ok(anchor
        .iter()
        .zip(&u)
        .map(|(a, b)| phi.cos() * a + phi.sin() * b)
        .collect())
}

/// Unit class directions common to a family.
fn family_planes(cfg: &StreamConfig, seed: u64, family_id: usize) -> Result<Vec<FeatureVec>> {
    let mut rng = rng_for(seed, &[4, family_id as u64]);
    (0..cfg.n_classes)
        .map(|_| {
            let mut p = gaussian_vec(&mut rng, cfg.d_img);
            normalize(&mut p)?;
            Ok(p)
        })
        .collect()
}

fn make_task(
    cfg: &StreamConfig,
    anchors: &[FeatureVec],
    seed: u64,
    task_id: usize,
    family_id: usize,
    share: f64,
) -> Result<TaskSpec> {
    let mut rng = rng_for(seed, &[2, task_id as u64]);
    let mut center = gaussian_vec(&mut rng, cfg.d_img);
    normalize(&mut center)?;
    center.iter_mut().for_each(|x| *x *= cfg.image_center_norm);
    // Half the family budget each, so any two members are within theta_same.
    let phi = 0.5 * cfg.theta_same_deg.to_radians() * rng.gen_range(0.25..1.0);
    let text_center: Vec<f64> = tilt(&anchors[family_id], phi, &mut rng)?
        .into_iter()
        .map(|x| x * cfg.text_norm)
        .collect();
    let family_rule = family_planes(cfg, seed, family_id)?;
    let mut label_planes = Vec::with_capacity(cfg.n_classes);
    for shared in &family_rule {
        let mut p = gaussian_vec(&mut rng, cfg.d_img);
        normalize(&mut p)?;
        p.iter_mut()
            .zip(shared)
            .for_each(|(x, f)| *x = share.sqrt() * f + (1.0 - share).sqrt() * *x);
        normalize(&mut p)?;
        label_planes.push(p);
    }
    Ok(TaskSpec {
        task_id,
        family_id,
        image_center: center,
        image_spread: cfg.image_spread,
        text_center,
        text_jitter: cfg.text_jitter,
        n_classes: cfg.n_classes,
        label_planes,
    })
}

fn validate_stream_config(cfg: &StreamConfig) -> Result<()> {
    ensure!(
        cfg.tasks_per_family >= 1 && cfg.n_classes >= 2,
        Generation,
        "need at least one task per family and two classes"
    );
    ensure!(
        cfg.d_img >= 1 && cfg.d_text >= 1,
        Generation,
        "feature dimensions must be positive"
    );
    ensure!(
        cfg.theta_same_deg >= 0.0 && cfg.theta_same_deg < cfg.theta_diff_deg,
        Generation,
        "within-family angle {} must be below cross-family angle {}",
        cfg.theta_same_deg,
        cfg.theta_diff_deg
    );
    ensure!(
        (0.0..=1.0).contains(&cfg.label_share),
        Generation,
        "label share {} outside [0, 1]",
        cfg.label_share
    );
    ensure!(
        cfg.image_spread >= 0.0 && cfg.text_jitter >= 0.0,
        Generation,
        "noise scales must be nonnegative"
    );
    Ok(())
}

fn check_angles(tasks: &[TaskSpec], cfg: &StreamConfig) -> Result<()> {
    let (same, diff) = (cfg.theta_same_deg.to_radians(), cfg.theta_diff_deg.to_radians());
    for (i, a) in tasks.iter().enumerate() {
        for b in &tasks[i + 1..] {
            let ang = angle(&a.text_center, &b.text_center);
            if a.family_id == b.family_id {
                ensure!(
                    ang <= same + 1e-9,
                    Generation,
                    "tasks {} and {} are {:.1} deg apart within a family",
                    a.task_id,
                    b.task_id,
                    ang.to_degrees()
                );
            } else {
                ensure!(
                    ang >= diff - 1e-9,
                    Generation,
                    "tasks {} and {} are only {:.1} deg apart across families; \
                     constraints infeasible for this dimension",
                    a.task_id,
                    b.task_id,
                    ang.to_degrees()
                );
            }
        }
    }
    Ok(())
}

/// Continual-learning tasks, family-major: ids `0..tasks_per_family` belong to
/// family 0, and so on.
pub fn make_task_stream(cfg: &StreamConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    validate_stream_config(cfg)?;
    let anchors = family_anchors(cfg, seed)?;
    let mut tasks = Vec::with_capacity(cfg.n_tasks());
    for f in 0..cfg.n_families {
        for k in 0..cfg.tasks_per_family {
            let id = f * cfg.tasks_per_family + k;
            tasks.push(make_task(cfg, &anchors, seed, id, f, cfg.label_share)?);
        }
    }
    check_angles(&tasks, cfg)?;
    Ok(tasks)
}

/// Pre-training tasks from the same family anchors, with ids after the stream's.
pub fn make_pretrain_mixture(cfg: &StreamConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    validate_stream_config(cfg)?;
    let anchors = family_anchors(cfg, seed)?;
    let offset = cfg.n_tasks();
    let mut tasks = Vec::new();
    for f in 0..cfg.n_families {
        for k in 0..cfg.pretrain_tasks_per_family {
            let id = offset + f * cfg.pretrain_tasks_per_family + k;
            tasks.push(make_task(cfg, &anchors, seed, id, f, 0.0)?);
        }
    }
    check_angles(&tasks, cfg)?;
    Ok(tasks)
}

/// Draws `n` triplets from `task`, deterministically in `seed`.
pub fn sample_batch(task: &TaskSpec, n: usize, seed: u64) -> Batch {
    let mut rng = rng_for(seed, &[3, task.task_id as u64]);
    let d_img = task.image_center.len();
    let d_text = task.text_center.len();
    let mut x_img = Tensor2::zeros(n, d_img);
    let mut x_text = Tensor2::zeros(n, d_text);
    let mut answers = Vec::with_capacity(n);
    for i in 0..n {
        for (o, c) in x_img.row_mut(i).iter_mut().zip(&task.image_center) {
            *o = c + task.image_spread * rng.sample::<f64, _>(StandardNormal);
        }
        for (o, c) in x_text.row_mut(i).iter_mut().zip(&task.text_center) {
            *o = c + task.text_jitter * rng.sample::<f64, _>(StandardNormal);
        }
        answers.push(task.answer(x_img.row(i)));
    }
    Batch {
        x_img,
        x_text,
        answers,
        task_id: task.task_id,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub d_img: usize,
    pub d_text: usize,
    pub d_tok: usize,
    pub hidden: usize,
    pub n_vocab: usize,
}

/// Pre-trained projector `V` (`d_img → d_tok`, params `w`, `b`) and a frozen
/// two-layer decoder head over `[token ; x_text]` (params `w1`, `b1`, `w2`, `b2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub format_version: u32,
    pub dims: BackboneDims,
    pub projector: ParamSet,
    pub decoder: ParamSet,
}

/// Graph handles for the decoder; bound as constants so no gradient is ever
/// read back into the backbone.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub w: Var,
    pub b: Var,
}

impl ProjectorVars {
    pub fn from_vars(vars: &ParamVars, prefix: &str) -> Self {
        Self {
            w: vars[&format!("{prefix}w") as &str],
            b: vars[&format!("{prefix}b") as &str],
        }
    }
}

impl FrozenBackbone {
    pub fn random(dims: BackboneDims, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[10]);
        let mut dense = |r: usize, c: usize| {
            let s = 1.0 / (r as f64).sqrt();
            Tensor2::new(r, c, gaussian_vec(&mut rng, r * c).into_iter().map(|x| x * s).collect())
        };
        let projector = ParamSet::new()
            .with("w", dense(dims.d_img, dims.d_tok)?)?
            .with("b", Tensor2::zeros(1, dims.d_tok))?;
        let decoder = ParamSet::new()
            .with("w1", dense(dims.d_tok + dims.d_text, dims.hidden)?)?
            .with("b1", Tensor2::zeros(1, dims.hidden))?
            .with("w2", dense(dims.hidden, dims.n_vocab)?)?
            .with("b2", Tensor2::zeros(1, dims.n_vocab))?;
        Ok(Self {
            format_version: BACKBONE_FORMAT_VERSION,
            dims,
            projector,
            decoder,
        })
    }

    pub fn bind_projector(&self, g: &mut Graph) -> ProjectorVars {
        let vars = self.projector.bind(g);
        ProjectorVars::from_vars(&vars, "")
    }

    pub fn bind_decoder(&self, g: &mut Graph) -> DecoderVars {
        let v = self.decoder.bind(g);
        DecoderVars {
            w1: v["w1"],
            b1: v["b1"],
            w2: v["w2"],
            b2: v["b2"],
        }
    }

    /// `V(x)` for every row.
    pub fn project(&self, x_img: &Tensor2) -> Result<Tensor2> {
        crate::numerics::affine(x_img, &self.projector["w"], &self.projector["b"])
    }

    /// Answer logits for rows of translated tokens and instruction embeddings.
    pub fn decode(&self, tokens: &Tensor2, x_text: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let dec = self.bind_decoder(&mut g);
        let t = g.leaf(tokens.clone());
        let x = g.leaf(x_text.clone());
        let out = decode_var(&mut g, t, x, &dec)?;
        Ok(g.value(out).clone())
    }

    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = self.projector.fingerprint();
        out.extend(self.decoder.fingerprint());
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        ensure!(
            b.format_version == BACKBONE_FORMAT_VERSION,
            Checkpoint,
            "backbone format version {} (expected {BACKBONE_FORMAT_VERSION})",
            b.format_version
        );
        Ok(b)
    }
}

/// Decoder forward on the tape: `tanh([tok ; text]·W1 + b1)·W2 + b2`.
/// Gradients flow to `tokens` (and `x_text`); the decoder's own leaves are
/// never collected.
pub fn decode_var(g: &mut Graph, tokens: Var, x_text: Var, dec: &DecoderVars) -> Result<Var> {
    ensure!(
        g.value(tokens).rows() == g.value(x_text).rows(),
        Dimension,
        "{} tokens for {} instructions",
        g.value(tokens).rows(),
        g.value(x_text).rows()
    );
    let input = g.concat_cols(&[tokens, x_text])?;
    ensure!(
        g.value(input).cols() == g.value(dec.w1).rows(),
        Dimension,
        "decoder expects {} input features, got {}",
        g.value(dec.w1).rows(),
        g.value(input).cols()
    );
    let h = g.affine(input, dec.w1, dec.b1)?;
    let h = g.tanh(h)?;
    g.affine(h, dec.w2, dec.b2)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], answers: &[usize]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(answers).filter(|(p, a)| p == a).count();
    hits as f64 / answers.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Mixture accuracy that ends pre-training.
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 1024,
            batch_size: 64,
            lr: 0.01,
            max_epochs: 200,
            accuracy_floor: 0.8,
        }
    }
}

/// Accuracy of the untouched backbone (`decode(V(x), text)`).
pub fn backbone_accuracy(backbone: &FrozenBackbone, batch: &Batch) -> Result<f64> {
    let tokens = backbone.project(&batch.x_img)?;
    let logits = backbone.decode(&tokens, &batch.x_text)?;
    Ok(accuracy(&argmax_rows(&logits), &batch.answers))
}

/// Jointly trains `V` and the decoder on the mixture until the mixture
/// accuracy (on held-out draws) reaches the floor, then returns them frozen.
pub fn pretrain_backbone(
    mixture: &[TaskSpec],
    dims: BackboneDims,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<FrozenBackbone> {
    ensure!(!mixture.is_empty(), PretrainFailure, "empty pre-training mixture");
    ensure!(
        mixture.iter().all(|t| t.n_classes <= dims.n_vocab),
        Dimension,
        "answer classes exceed the vocabulary"
    );
    let mut backbone = FrozenBackbone::random(dims.clone(), seed)?;
    let train: Vec<Batch> = mixture
        .iter()
        .map(|t| sample_batch(t, cfg.samples_per_task, derive_seed(seed, &[20])))
        .collect();
    let held_out: Vec<Batch> = mixture
        .iter()
        .map(|t| sample_batch(t, cfg.samples_per_task / 2, derive_seed(seed, &[21])))
        .collect();
    let pool = concat_batches(&train);

    // Projector and decoder are trained together as one parameter set here.
    let mut params = ParamSet::new();
    for (k, v) in backbone.projector.iter() {
        params.insert(format!("v.{k}"), v.clone())?;
    }
    for (k, v) in backbone.decoder.iter() {
        params.insert(format!("d.{k}"), v.clone())?;
    }
    let mut adam = AdamState::new();
    let mut rng = rng_for(seed, &[22]);
    let mut last_acc = 0.0;
    for _epoch in 0..cfg.max_epochs {
        let order = permutation(pool.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let b = pool.select(chunk);
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let x = g.leaf(b.x_img.clone());
            let t = g.leaf(b.x_text.clone());
            let tok = g.affine(x, vars["v.w"], vars["v.b"])?;
            let dec = DecoderVars {
                w1: vars["d.w1"],
                b1: vars["d.b1"],
                w2: vars["d.w2"],
                b2: vars["d.b2"],
            };
            let logits = decode_var(&mut g, tok, t, &dec)?;
            let ce = g.cross_entropy(logits, b.one_hot(dims.n_vocab))?;
            let loss = g.mean_all(ce)?;
            crate::numerics::gradient(&g, loss, &mut params, &vars)?;
            adam_step(&mut params, &mut adam, cfg.lr)?;
        }
        for (k, v) in params.iter() {
            match k.split_once('.') {
                Some(("v", name)) => backbone.projector.set(name, v.clone())?,
                Some(("d", name)) => backbone.decoder.set(name, v.clone())?,
                _ => unreachable!("parameter names are prefixed"),
            }
        }
        let mut hits = 0.0;
        let mut total = 0.0;
        for b in &held_out {
            hits += backbone_accuracy(&backbone, b)? * b.len() as f64;
            total += b.len() as f64;
        }
        last_acc = hits / total;
        if last_acc >= cfg.accuracy_floor {
            log::info!("pre-training reached {last_acc:.3} after {} epochs", _epoch + 1);
            return Ok(backbone);
        }
    }
    Err(MvpError::PretrainFailure(format!(
        "mixture accuracy {last_acc:.3} below floor {} after {} epochs",
        cfg.accuracy_floor, cfg.max_epochs
    )))
}

pub(crate) fn concat_batches(batches: &[Batch]) -> Batch {
    let imgs: Vec<&Tensor2> = batches.iter().map(|b| &b.x_img).collect();
    let texts: Vec<&Tensor2> = batches.iter().map(|b| &b.x_text).collect();
    Batch {
        x_img: Tensor2::vstack(&imgs).expect("same feature width"),
        x_text: Tensor2::vstack(&texts).expect("same feature width"),
        answers: batches.iter().flat_map(|b| b.answers.iter().copied()).collect(),
        task_id: batches.first().map_or(0, |b| b.task_id),
    }
}

pub(crate) fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Versioned JSON form of a task stream.
#[derive(Debug, Serialize, Deserialize)]
pub struct StreamFile {
    pub format_version: u32,
    pub tasks: Vec<TaskSpec>,
}

pub fn stream_to_json(tasks: &[TaskSpec]) -> Result<String> {
    Ok(serde_json::to_string(&StreamFile {
        format_version: STREAM_FORMAT_VERSION,
        tasks: tasks.to_vec(),
    })?)
}

pub fn stream_from_json(s: &str) -> Result<Vec<TaskSpec>> {
    let f: StreamFile = serde_json::from_str(s)?;
    ensure!(
        f.format_version == STREAM_FORMAT_VERSION,
        Checkpoint,
        "stream format version {} (expected {STREAM_FORMAT_VERSION})",
        f.format_version
    );
    Ok(f.tasks)
}
