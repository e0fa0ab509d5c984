//! Memory summaries, frame-specific query embedding, mask decoding,
//! auxiliary readouts and the segmentation loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::TextEmbedding;
use crate::error::{dim_err, Error, Result};
use crate::memory::{GlobalMemory, LocalMemory};
use crate::numerics::{linear, Graph, Init, ParamTree, Tensor, Var};

/// Binarization threshold; a pixel is foreground iff its probability is
/// strictly greater.
pub const THRESHOLD: f64 = 0.5;
/// Default auxiliary loss weight.
pub const AUX_WEIGHT: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    /// `[1, D]`.
    pub q: Tensor,
    /// Attention over the `N_w` word slots; zero on pads.
    pub word_attn: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// `N_v` probabilities in grid row-major order.
    pub patch_probs: Vec<f64>,
    /// `[H, W]`.
    pub pixel_probs: Tensor,
    /// Row-major `H * W`.
    pub binary: Vec<bool>,
    /// One patch grid per fusion module.
    pub aux_probs: Vec<Vec<f64>>,
    pub word_attn: Vec<f64>,
}

pub fn binarize(pixel_probs: &Tensor, threshold: f64) -> Vec<bool> {
    pixel_probs.data().iter().map(|&p| p > threshold).collect()
}

pub fn init<R: Rng>(cfg: &ModelConfig, init: &mut Init<'_, R>) -> Result<()> {
    let d = cfg.dim;
    init.weight("decoder.w1", 3 * d, d)?;
    init.weight("decoder.w2", d, d)?;
    for k in 1..=cfg.modules {
        let p = format!("decoder.aux{k}");
        init.weight(&format!("{p}.w1"), d, d / 2)?;
        init.zeros(&format!("{p}.b1"), &[1, d / 2])?;
        init.weight(&format!("{p}.w2"), d / 2, 1)?;
        init.zeros(&format!("{p}.b2"), &[1, 1])?;
    }
    Ok(())
}

/// Average-pooled `[1, D]` summaries of the frame and both memories; an
/// absent memory contributes a zero row.
pub fn summarize_node(
    g: &mut Graph,
    v: Var,
    global: Option<Var>,
    local: Option<Var>,
) -> Result<[Var; 3]> {
    let (_, d) = g.shape(v);
    let pool = |g: &mut Graph, m: Option<Var>| match m {
        Some(m) => g.mean_rows(m),
        None => g.constant(Tensor::zeros(&[1, d])),
    };
    let sv = pool(g, Some(v))?;
    let sg = pool(g, global)?;
    let sl = pool(g, local)?;
    Ok([sv, sg, sl])
}

pub fn summarize(
    v: &Tensor,
    global: &GlobalMemory,
    local: &LocalMemory,
) -> Result<[Tensor; 3]> {
    let d = v.cols();
    let pool = |t: &Tensor| {
        if t.rows() == 0 {
            Tensor::zeros(&[1, d])
        } else {
            t.mean_rows()
        }
    };
    Ok([pool(v), pool(&global.cells), pool(&local.cells)])
}

/// Word attention guided by the three summaries; returns `(q, a)` with
/// `q` `[1, D]` and `a` `[1, N_w]`.
pub fn query_node(
    g: &mut Graph,
    words: Var,
    pad_mask: &[bool],
    summaries: [Var; 3],
) -> Result<(Var, Var)> {
    if !pad_mask.iter().any(|&m| m) {
        return Err(Error::Input("expression has no real words".into()));
    }
    let ctx = g.concat_cols(&summaries)?;
    let w1 = g.param("decoder.w1")?;
    let w2 = g.param("decoder.w2")?;
    let s = g.matmul(ctx, w1)?;
    let k = g.matmul(words, w2)?;
    let scores = g.matmul_t(s, false, k, true)?;
    let a = g.softmax_rows(scores, Some(pad_mask))?;
    let q = g.matmul(a, words)?;
    Ok((q, a))
}

pub fn query_embed(
    text: &TextEmbedding,
    summaries: &[Tensor; 3],
    params: &ParamTree,
) -> Result<QueryVector> {
    let mut g = Graph::inference(params);
    let e = g.constant(text.tokens.clone())?;
    let s = [
        g.constant(summaries[0].clone())?,
        g.constant(summaries[1].clone())?,
        g.constant(summaries[2].clone())?,
    ];
    let (q, a) = query_node(&mut g, e, &text.pad_mask, s)?;
    Ok(QueryVector {
        q: g.value(q).clone(),
        word_attn: g.value(a).data().to_vec(),
    })
}

/// `σ(G · qᵀ / sqrt(D))` as an `[N_v, 1]` column.
pub fn decode_node(g: &mut Graph, ctx: Var, q: Var) -> Result<Var> {
    let (_, d) = g.shape(ctx);
    let s = g.matmul_t(ctx, false, q, true)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    g.sigmoid(s)
}

pub fn decode_mask(ctx: &Tensor, q: &QueryVector) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let c = g.constant(ctx.clone())?;
    let qv = g.constant(q.q.clone())?;
    let s = decode_node(&mut g, c, qv)?;
    Ok(g.value(s).data().to_vec())
}

/// Per-module readout `D → D/2 → 1` with GELU and a sigmoid, `[N_v, 1]`.
pub fn aux_node(g: &mut Graph, tap: Var, module: usize) -> Result<Var> {
    let p = format!("decoder.aux{module}");
    let h = linear(g, tap, &p, "w1", "b1")?;
    let h = g.gelu(h)?;
    let s = linear(g, h, &p, "w2", "b2")?;
    g.sigmoid(s)
}

/// `module` counts from 1.
pub fn aux_readout(tap: &Tensor, module: usize, params: &ParamTree) -> Result<Vec<f64>> {
    let mut g = Graph::inference(params);
    let t = g.constant(tap.clone())?;
    let s = aux_node(&mut g, t, module)?;
    Ok(g.value(s).data().to_vec())
}

fn interp_matrix(out: usize, src: usize) -> Tensor {
    let mut m = vec![0.0; out * src];
    for i in 0..out {
        let pos = if out > 1 && src > 1 {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let f = pos - lo as f64;
        if f == 0.0 || lo + 1 >= src {
            m[i * src + lo] = 1.0;
        } else {
            m[i * src + lo] = 1.0 - f;
            m[i * src + lo + 1] = f;
        }
    }
    Tensor::matrix(out, src, m)
}

/// Corner-aligned bilinear interpolation from the patch grid to pixels,
/// expressed as `A · P · Bᵀ`.
#[derive(Clone, Debug)]
pub struct Upsampler {
    grid: (usize, usize),
    rows: Tensor,
    cols: Tensor,
}

impl Upsampler {
    pub fn new(patch: usize, width: usize, height: usize) -> Result<Self> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(dim_err!("{width}x{height} image is not a grid of {patch}-pixel patches"));
        }
        let (gw, gh) = (width / patch, height / patch);
        Ok(Self {
            grid: (gw, gh),
            rows: interp_matrix(height, gh),
            cols: interp_matrix(width, gw),
        })
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.patch, cfg.frame_width, cfg.frame_height)
    }

    /// `[N_v, 1]` patch column to an `[H * W, 1]` pixel column.
    pub fn node(&self, g: &mut Graph, probs: Var) -> Result<Var> {
        let (gw, gh) = self.grid;
        if g.shape(probs) != (gw * gh, 1) {
            return Err(dim_err!("{:?} probabilities for a {gw}x{gh} grid", g.shape(probs)));
        }
        let grid = g.reshape(probs, gh, gw)?;
        let a = g.constant(self.rows.clone())?;
        let b = g.constant(self.cols.clone())?;
        let tall = g.matmul(a, grid)?;
        let full = g.matmul_t(tall, false, b, true)?;
        let (h, w) = g.shape(full);
        g.reshape(full, h * w, 1)
    }

    /// `[H, W]` probabilities.
    pub fn apply(&self, patch_probs: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(patch_probs.len(), 1, patch_probs.to_vec()))
            .map_err(|_| dim_err!("empty probability grid"))?;
        let out = self.node(&mut g, p)?;
        let (h, w) = (self.rows.rows(), self.cols.rows());
        g.value(out).clone().reshape(&[h, w])
    }
}

pub fn upsample(patch_probs: &[f64], patch: usize, width: usize, height: usize) -> Result<Tensor> {
    Upsampler::new(patch, width, height)?.apply(patch_probs)
}

/// `BCE(final) + λ · Σ_k BCE(aux_k)` on pixel columns.
pub fn loss_node(
    g: &mut Graph,
    main: Var,
    aux: &[Var],
    target: &[f64],
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("auxiliary weight must be >= 0, got {lambda}")));
    }
    let mut terms = vec![(g.bce_mean(main, target)?, 1.0)];
    for &a in aux {
        terms.push((g.bce_mean(a, target)?, lambda));
    }
    g.weighted_sum(&terms)
}

pub fn loss(main: &Tensor, aux: &[Tensor], gt: &[bool], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let target: Vec<f64> = gt.iter().map(|&b| f64::from(u8::from(b))).collect();
    let m = g.constant(main.clone())?;
    let a = aux
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    for t in std::iter::once(main).chain(aux) {
        if t.len() != gt.len() {
            return Err(dim_err!("{} probabilities vs {} mask pixels", t.len(), gt.len()));
        }
    }
    let l = loss_node(&mut g, m, &a, &target, lambda)?;
    Ok(g.value(l).at(0, 0))
}
