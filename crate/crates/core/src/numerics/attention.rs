//! One multi-head self-attention block with a residual connection.

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamSet, ParamVars};
use super::tape::{Graph, Var};
use super::tensor::Tensor2;
use crate::error::{ensure, Result};

// No key bias: it shifts every logit of a query equally and cancels in the softmax.
const NAMES: [&str; 7] = ["wq", "bq", "wk", "wv", "bv", "wo", "bo"];

/// Graph handles for the seven tensors of an attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    wq: Var,
    bq: Var,
    wk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

impl AttentionVars {
    /// Looks up `{prefix}wq`, `{prefix}bq`, `{prefix}wk`, ... in bound parameters.
    pub fn from_vars(vars: &ParamVars, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            let name = format!("{prefix}{n}");
            vars.get(&name).ok_or_else(|| {
                crate::error::MvpError::Configuration(format!("missing attention parameter {name}"))
            })
        };
        Ok(Self {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            wo: get("wo")?,
            bo: get("bo")?,
        })
    }
}

/// Random attention parameters of width `d` under `{prefix}` names.
pub fn init_attention_params<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    let scale = 1.0 / (d as f64).sqrt();
    for n in NAMES {
        let t = if n.starts_with('w') {
            let data = (0..d * d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor2::new(d, d, data)?
        } else {
            Tensor2::zeros(1, d)
        };
        params.insert(format!("{prefix}{n}"), t)?;
    }
    Ok(())
}

/// Applies the block to an `(n·seq_len) × d` stack of sequences:
/// `x + Attn(x·Wq + bq, x·Wk, x·Wv + bv)·Wo + bo`.
pub fn attention_block_var(
    g: &mut Graph,
    x: Var,
    p: &AttentionVars,
    seq_len: usize,
    heads: usize,
) -> Result<Var> {
    let d = g.value(x).cols();
    ensure!(
        heads > 0 && d.is_multiple_of(heads),
        Configuration,
        "{heads} heads do not divide width {d}"
    );
    let q = g.affine(x, p.wq, p.bq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.affine(x, p.wv, p.bv)?;
    let a = g.attention(q, k, v, seq_len, heads)?;
    let o = g.affine(a, p.wo, p.bo)?;
    g.add(x, o)
}

/// Applies the block to a single `s × d` sequence using parameters named
/// `wq, bq, wk, wv, bv, wo, bo`.
pub fn attention_block(seq: &Tensor2, params: &ParamSet, heads: usize) -> Result<Tensor2> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let p = AttentionVars::from_vars(&vars, "")?;
    let x = g.leaf(seq.clone());
    let out = attention_block_var(&mut g, x, &p, seq.rows(), heads)?;
    Ok(g.value(out).clone())
}
