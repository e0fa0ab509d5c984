//! Attention primitive and the post-norm transformer encoder block.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamTree};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Scaled dot-product attention on the tape:
/// `softmax(q · kᵀ / sqrt(dk)) · v`, with optional key masking.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let (_, dq) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, _) = g.shape(v);
    if dq != dk {
        return Err(dim_err!("attention: query width {dq} vs key width {dk}"));
    }
    if nk != nv {
        return Err(dim_err!("attention: {nk} keys vs {nv} values"));
    }
    if nk == 0 {
        return Err(dim_err!("attention needs at least one key"));
    }
    let scores = g.matmul_t(q, false, k, true)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax_rows(scaled, key_mask)?;
    g.matmul(weights, v)
}

/// Single-head attention over plain tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for (name, t) in [("query", q), ("key", k), ("value", v)] {
        t.ensure_finite(name)?;
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let out = attend(&mut g, qv, kv, vv, None)?;
    Ok(g.value(out).clone())
}

/// `x · W + b` with `W` stored `[in, out]` and `b` as `[1, out]`.
pub fn linear(g: &mut Graph, x: Var, prefix: &str, weight: &str, bias: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.{weight}"))?;
    let b = g.param(&format!("{prefix}.{bias}"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Shape of an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>, prefix: &str) -> Result<()> {
        self.validate()?;
        let d = self.dim;
        let hidden = d * self.mlp_ratio;
        for p in ["wq", "wk", "wv", "wo"] {
            init.weight(&format!("{prefix}.msa.{p}"), d, d)?;
        }
        // no key bias: it shifts every score of a softmax row equally
        for p in ["bq", "bv", "bo"] {
            init.zeros(&format!("{prefix}.msa.{p}"), &[1, d])?;
        }
        init.weight(&format!("{prefix}.mlp.w1"), d, hidden)?;
        init.zeros(&format!("{prefix}.mlp.b1"), &[1, hidden])?;
        init.weight(&format!("{prefix}.mlp.w2"), hidden, d)?;
        init.zeros(&format!("{prefix}.mlp.b2"), &[1, d])?;
        for ln in ["ln1", "ln2"] {
            init.ones(&format!("{prefix}.{ln}.gain"), &[1, d])?;
            init.zeros(&format!("{prefix}.{ln}.bias"), &[1, d])?;
        }
        Ok(())
    }
}

/// Multi-head self-attention; `key_mask` hides padded tokens as keys.
pub fn msa(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (_, d) = g.shape(x);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let p = format!("{prefix}.msa");
    let q = linear(g, x, &p, "wq", "bq")?;
    let wk = g.param(&format!("{p}.wk"))?;
    let k = g.matmul(x, wk)?;
    let v = linear(g, x, &p, "wv", "bv")?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    if heads == 1 {
        outs.push(attend(g, q, k, v, key_mask)?);
    } else {
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            outs.push(attend(g, qh, kh, vh, key_mask)?);
        }
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, cat, &p, "wo", "bo")
}

/// `X' = LN(X + MSA(X)); Y = LN(X' + MLP(X'))`.
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let att = msa(g, x, prefix, heads, key_mask)?;
    let r1 = g.add(x, att)?;
    let x1 = layer_norm(g, r1, &format!("{prefix}.ln1"))?;
    let h = linear(g, x1, &format!("{prefix}.mlp"), "w1", "b1")?;
    let h = g.gelu(h)?;
    let m = linear(g, h, &format!("{prefix}.mlp"), "w2", "b2")?;
    let r2 = g.add(x1, m)?;
    layer_norm(g, r2, &format!("{prefix}.ln2"))
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Encoder block over plain tensors.
pub fn encoder_block_forward(
    x: &Tensor,
    params: &ParamTree,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let xv = g.constant(x.clone())?;
    let y = encoder_block(&mut g, xv, prefix, heads, None)?;
    Ok(g.value(y).clone())
}
