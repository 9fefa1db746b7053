//! Reverse-mode differentiation over a fixed vocabulary of matrix operations.
//!
//! A [`Graph`] records every value it produces together with the operation
//! that produced it. [`Graph::backward`] walks the record in reverse and
//! returns the gradient of a `1 × 1` loss with respect to every node.
//! Variables carry the id of the graph that created them; handing a variable
//! to a foreign graph is a traceability error.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dot, log_sum_exp, softmax_in_place, Tensor2};
use crate::error::{ensure, Result};
#[cfg(test)]
use crate::error::MvpError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `n × m` times an `n × 1` column, broadcast across columns.
    MulCol(usize, usize),
    /// Any tensor times a `1 × 1` node.
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    SumAll(usize),
    SumCols(usize),
    MeanRows(usize),
    Softmax(usize),
    MaskFill(usize),
    CrossEntropy(usize, Tensor2),
    LogSumExp(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    StackSeq(Vec<usize>),
    GroupMean(usize, usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Gradients of one loss with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<Tensor2> {
        ensure!(
            v.graph == self.graph && v.idx < self.grads.len(),
            Traceability,
            "variable was not recorded on the differentiated graph"
        );
        Ok(self.grads[v.idx].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.idx];
            Tensor2::zeros(r, c)
        }))
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        ensure!(
            v.graph == self.id && v.idx < self.nodes.len(),
            Traceability,
            "variable belongs to another graph"
        );
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor2 {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.idx].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Records an input. Parameters and constants are both leaves; only the
    /// caller decides which leaves' gradients it reads.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let out = self.val(ia).add_row(self.val(ir))?;
        Ok(self.push(out, Op::AddRow(ia, ir)))
    }

    /// `x · w + b` with row-broadcast bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).add(self.val(ib))?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).sub(self.val(ib))?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        ensure!(
            self.val(ib).data().iter().all(|v| *v != 0.0),
            DegenerateVector,
            "division by zero"
        );
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x / y)?;
        Ok(self.push(out, Op::Div(ia, ib)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.idx(a)?, self.idx(col)?);
        let (av, cv) = (self.val(ia), self.val(ic));
        ensure!(
            cv.cols() == 1 && cv.rows() == av.rows(),
            Dimension,
            "column broadcast of {:?} onto {:?}",
            cv.shape(),
            av.shape()
        );
        let mut out = av.clone();
        for r in 0..av.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(ia, ic)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.idx(a)?, self.idx(s)?);
        ensure!(
            self.val(is).shape() == (1, 1),
            Dimension,
            "scalar operand has shape {:?}",
            self.val(is).shape()
        );
        let out = self.val(ia).scale(self.val(is).data()[0]);
        Ok(self.push(out, Op::MulScalar(ia, is)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).scale(s);
        Ok(self.push(out, Op::Scale(ia, s)))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|v| v + c);
        Ok(self.push(out, Op::AddConst(ia)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(f);
        Ok(self.push(out, op(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        ensure!(
            self.val(ia).data().iter().all(|v| *v > 0.0),
            DegenerateVector,
            "log of a non-positive value"
        );
        self.unary(a, f64::ln, Op::Log)
    }

    /// Square root; the subgradient at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        ensure!(
            self.val(ia).data().iter().all(|v| *v >= 0.0),
            DegenerateVector,
            "sqrt of a negative value"
        );
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor2::scalar(self.val(ia).sum());
        Ok(self.push(out, Op::SumAll(ia)))
    }

    /// Per-row sums as an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let out = Tensor2::column_vector((0..av.rows()).map(|r| av.row(r).iter().sum()).collect());
        Ok(self.push(out, Op::SumCols(ia)))
    }

    /// Column means as a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).mean_rows();
        Ok(self.push(out, Op::MeanRows(ia)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        ensure!(n > 0, Dimension, "mean of an empty tensor");
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise softmax; `-inf` entries receive zero probability and zero gradient.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut out = self.val(ia).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r))?;
        }
        Ok(self.push(out, Op::Softmax(ia)))
    }

    /// Replaces entries where `keep` is false by `-inf`.
    pub fn mask_fill(&mut self, a: Var, keep: &Tensor2) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).zip_map(keep, |v, k| {
            if k != 0.0 {
                v
            } else {
                f64::NEG_INFINITY
            }
        })?;
        Ok(self.push(out, Op::MaskFill(ia)))
    }

    /// Per-row cross-entropy `-Σ_j t_ij log softmax(z_i)_j` against a fixed
    /// target matrix, as an `n × 1` column.
    pub fn cross_entropy(&mut self, logits: Var, target: Tensor2) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = self.val(il);
        ensure!(
            z.shape() == target.shape(),
            Dimension,
            "target {:?} for logits {:?}",
            target.shape(),
            z.shape()
        );
        let mut out = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let lse = log_sum_exp(z.row(r));
            out.push(
                target
                    .row(r)
                    .iter()
                    .zip(z.row(r))
                    .filter(|(t, _)| **t != 0.0)
                    .map(|(t, v)| t * (lse - v))
                    .sum(),
            );
        }
        Ok(self.push(Tensor2::column_vector(out), Op::CrossEntropy(il, target)))
    }

    /// Per-row `log Σ exp`, as an `n × 1` column.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let out = Tensor2::column_vector((0..av.rows()).map(|r| log_sum_exp(av.row(r))).collect());
        Ok(self.push(out, Op::LogSumExp(ia)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|p| self.idx(*p))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<&Tensor2> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor2::hstack(&vals)?;
        Ok(self.push(out, Op::ConcatCols(idx)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(ia, start)))
    }

    /// Interleaves `s` equally-shaped `n × d` token matrices into an
    /// `(n·s) × d` stack of length-`s` sequences: row `i·s + k` is row `i` of
    /// `tokens[k]`.
    pub fn stack_seq(&mut self, tokens: &[Var]) -> Result<Var> {
        let idx = tokens
            .iter()
            .map(|p| self.idx(*p))
            .collect::<Result<Vec<_>>>()?;
        ensure!(!idx.is_empty(), Dimension, "empty sequence");
        let shape = self.val(idx[0]).shape();
        ensure!(
            idx.iter().all(|&i| self.val(i).shape() == shape),
            Dimension,
            "sequence tokens differ in shape"
        );
        let (n, d) = shape;
        let s = idx.len();
        let mut out = Tensor2::zeros(n * s, d);
        for i in 0..n {
            for (k, &t) in idx.iter().enumerate() {
                out.row_mut(i * s + k).copy_from_slice(self.val(t).row(i));
            }
        }
        Ok(self.push(out, Op::StackSeq(idx)))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        ensure!(
            group > 0 && av.rows().is_multiple_of(group),
            Dimension,
            "{} rows do not split into groups of {group}",
            av.rows()
        );
        let n = av.rows() / group;
        let mut out = Tensor2::zeros(n, av.cols());
        for i in 0..n {
            let row = out.row_mut(i);
            for k in 0..group {
                for (o, v) in row.iter_mut().zip(av.row(i * group + k)) {
                    *o += v / group as f64;
                }
            }
        }
        Ok(self.push(out, Op::GroupMean(ia, group)))
    }

    /// Scaled dot-product attention within each length-`seq_len` sequence of
    /// the stacked `q`, `k`, `v` rows, split into `heads` column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qv, kv, vv) = (self.val(iq), self.val(ik), self.val(iv));
        ensure!(
            qv.shape() == kv.shape() && kv.shape() == vv.shape(),
            Dimension,
            "attention operands differ in shape"
        );
        let (rows, d) = qv.shape();
        ensure!(
            heads > 0 && d % heads == 0,
            Configuration,
            "{heads} heads do not divide width {d}"
        );
        ensure!(
            seq_len > 0 && rows % seq_len == 0,
            Dimension,
            "{rows} rows do not split into sequences of {seq_len}"
        );
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let n_seq = rows / seq_len;
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = Tensor2::zeros(rows, d);
        let mut scores = vec![0.0; seq_len];
        for b in 0..n_seq {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq_len {
                    let qi = &qv.row(b * seq_len + i)[cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(qi, &kv.row(b * seq_len + j)[cols.clone()]) * inv;
                    }
                    softmax_in_place(&mut scores)?;
                    let base = ((b * heads + h) * seq_len + i) * seq_len;
                    probs[base..base + seq_len].copy_from_slice(&scores);
                    let out_row = &mut out.row_mut(b * seq_len + i)[cols.clone()];
                    for (j, p) in scores.iter().enumerate() {
                        let vj = &vv.row(b * seq_len + j)[cols.clone()];
                        for (o, x) in out_row.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        ensure!(
            self.val(il).shape() == (1, 1),
            Dimension,
            "loss must be 1x1, got {:?}",
            self.val(il).shape()
        );
        let mut grads: Vec<Option<Tensor2>> = vec![None; il + 1];
        grads[il] = Some(Tensor2::scalar(1.0));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |j: usize, d: Tensor2| {
            debug_assert_eq!(d.shape(), self.val(j).shape());
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.val(*b))?);
                acc(*b, self.val(*a).t_matmul(g)?);
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.mean_rows().scale(g.rows() as f64));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.val(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(self.val(*a), |x, y| x * y)?);
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                acc(*a, g.zip_map(bv, |x, y| x / y)?);
                let gy = g.zip_map(y, |x, q| x * q)?;
                acc(*b, gy.zip_map(bv, |x, d| -x / d)?);
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.val(*a), self.val(*c));
                let mut ga = g.clone();
                let mut gc = Vec::with_capacity(av.rows());
                for r in 0..av.rows() {
                    let s = cv.data()[r];
                    gc.push(dot(g.row(r), av.row(r)));
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                acc(*a, ga);
                acc(*c, Tensor2::column_vector(gc));
            }
            Op::MulScalar(a, s) => {
                let sv = self.val(*s).data()[0];
                acc(*a, g.scale(sv));
                acc(*s, Tensor2::scalar(dot(g.data(), self.val(*a).data())));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |x, t| x * (1.0 - t * t))?),
            Op::Exp(a) => acc(*a, g.zip_map(y, |x, e| x * e)?),
            Op::Log(a) => acc(*a, g.zip_map(self.val(*a), |x, v| x / v)?),
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(y, |x, s| if s > 0.0 { 0.5 * x / s } else { 0.0 })?,
            ),
            Op::Abs(a) => acc(*a, g.zip_map(self.val(*a), |x, v| x * sign(v))?),
            Op::SumAll(a) => {
                let (r, c) = self.val(*a).shape();
                acc(*a, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::SumCols(a) => {
                let (r, c) = self.val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    let s = g.data()[row];
                    ga.row_mut(row).iter_mut().for_each(|v| *v = s);
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    for (o, x) in ga.row_mut(row).iter_mut().zip(g.data()) {
                        *o = x / r as f64;
                    }
                }
                acc(*a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for ((o, gy), p) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = p * (gy - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::MaskFill(a) => {
                acc(
                    *a,
                    g.zip_map(y, |x, v| if v == f64::NEG_INFINITY { 0.0 } else { x })?,
                );
            }
            Op::CrossEntropy(l, target) => {
                let z = self.val(*l);
                let mut gz = z.clone();
                for r in 0..z.rows() {
                    softmax_in_place(gz.row_mut(r))?;
                    let mass: f64 = target.row(r).iter().sum();
                    let gr = g.data()[r];
                    for (o, t) in gz.row_mut(r).iter_mut().zip(target.row(r)) {
                        *o = gr * (*o * mass - t);
                    }
                }
                acc(*l, gz);
            }
            Op::LogSumExp(a) => {
                let mut ga = self.val(*a).clone();
                for r in 0..ga.rows() {
                    softmax_in_place(ga.row_mut(r))?;
                    let gr = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    acc(p, g.slice_cols(start, w)?);
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                acc(*a, ga);
            }
            Op::StackSeq(parts) => {
                let s = parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    let (n, d) = self.val(p).shape();
                    let mut gp = Tensor2::zeros(n, d);
                    for i in 0..n {
                        gp.row_mut(i).copy_from_slice(g.row(i * s + k));
                    }
                    acc(p, gp);
                }
            }
            Op::GroupMean(a, group) => {
                let (r, c) = self.val(*a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    for (o, x) in ga.row_mut(row).iter_mut().zip(g.row(row / group)) {
                        *o = x / *group as f64;
                    }
                }
                acc(*a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (rows, d) = qv.shape();
                let (s, dh) = (*seq_len, d / *heads);
                let inv = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor2::zeros(rows, d);
                let mut gk = Tensor2::zeros(rows, d);
                let mut gv = Tensor2::zeros(rows, d);
                let mut dp = vec![0.0; s];
                for b in 0..rows / s {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..s {
                            let base = ((b * heads + h) * s + i) * s;
                            let p = &probs[base..base + s];
                            let gi = &g.row(b * s + i)[cols.clone()];
                            for j in 0..s {
                                dp[j] = dot(gi, &vv.row(b * s + j)[cols.clone()]);
                                let gvj = &mut gv.row_mut(b * s + j)[cols.clone()];
                                for (o, x) in gvj.iter_mut().zip(gi) {
                                    *o += p[j] * x;
                                }
                            }
                            let inner = dot(p, &dp);
                            for j in 0..s {
                                let ds = p[j] * (dp[j] - inner) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = kv.row(b * s + j)[cols.clone()].to_vec();
                                let qi = qv.row(b * s + i)[cols.clone()].to_vec();
                                for (o, x) in gq.row_mut(b * s + i)[cols.clone()].iter_mut().zip(&kj) {
                                    *o += ds * x;
                                }
                                for (o, x) in gk.row_mut(b * s + j)[cols.clone()].iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
