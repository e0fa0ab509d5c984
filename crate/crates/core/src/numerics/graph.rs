//! Reverse-mode autodiff over matrix-valued nodes.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough state to push gradients back to its inputs. All operations are
//! two-dimensional; vectors are `[1, n]` or `[n, 1]` matrices.

use std::collections::BTreeMap;

use super::gemm::{dgemm, MatRef};
use super::params::ParamTree;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// BCE probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// LayerNorm variance guard.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    Im2Col { a: Var, h: usize, w: usize },
    Bce { pred: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape bound to an optional parameter tree.
pub struct Graph<'p> {
    params: Option<&'p ParamTree>,
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
    track: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, zero if unreached.
    pub fn of(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.nodes[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients keyed by parameter name, for every parameter the graph used.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), self.of(*v)))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A tape with no parameter tree; use [`Graph::variable`] for leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            track: true,
        }
    }

    /// A tape whose [`Graph::param`] leaves come from `params` and carry
    /// gradients.
    pub fn with_params(params: &'p ParamTree) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Forward-only tape: parameters are treated as constants.
    pub fn inference(params: &'p ParamTree) -> Self {
        Self {
            params: Some(params),
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} at node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn to_matrix(t: Tensor) -> Tensor {
        if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(&[r, c]).expect("matrix view")
        }
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Self::to_matrix(t), Op::Input, false)
    }

    /// Unnamed leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        let track = self.track;
        self.push(Self::to_matrix(t), Op::Input, track)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::Config(format!("graph has no parameters (wanted {name})")))?;
        let t = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = self.variable(t)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let ma = MatRef::new(self.value(a).data(), ar, ac, ta);
        let mb = MatRef::new(self.value(b).data(), br, bc, tb);
        if ma.cols != mb.rows {
            return Err(dim_err!(
                "matmul inner dims {}x{} · {}x{}",
                ma.rows,
                ma.cols,
                mb.rows,
                mb.cols
            ));
        }
        let mut out = vec![0.0; ma.rows * mb.cols];
        dgemm(ma, mb, 0.0, &mut out);
        let t = Tensor::matrix(ma.rows, mb.cols, out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::matrix(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, d]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(dim_err!("add_row: {:?} onto {r}x{c}", self.shape(row)));
        }
        let rv = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for i in 0..r {
            for (x, b) in t.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `[r, 1]`).
    pub fn mul_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(dim_err!("mul_rows: {:?} for {r} rows", self.shape(col)));
        }
        let cv = self.value(col).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, s) in cv.iter().enumerate() {
            t.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(t, Op::MulRows(a, col), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(t, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. Columns whose `mask` entry is false get probability
    /// exactly zero; every row must keep at least one column.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.len() != c {
                return Err(dim_err!("softmax mask length {} for {c} columns", m.len()));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Input("softmax over fully masked row".into()));
            }
        }
        if c == 0 {
            return Err(dim_err!("softmax over zero columns"));
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut t = self.value(a).clone();
        for i in 0..r {
            let row = t.row_mut(i);
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - mx).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with learnable `[1, d]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(dim_err!("layer_norm affine params must be 1x{c}"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| dim_err!("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(dim_err!("concat_rows: column mismatch {pc} vs {c}"));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(dim_err!("slice_rows {start}+{len} of {r}"));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::matrix(len, c, data), Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(dim_err!("concat_cols: row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(dim_err!("slice_cols {start}+{len} of {c}"));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, len, data), Op::SliceCols(a, start), ng)
    }

    /// Average pooling over rows: `[r, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        if r == 0 {
            return Err(dim_err!("mean over zero rows"));
        }
        let t = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(t, Op::MeanRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(&[rows, cols])?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    /// 3×3 zero-padded patch extraction over an `h × w` grid whose cells are
    /// the rows of `a` (row-major, `c` channels each). Output row `p` holds
    /// the 9 neighbours of cell `p` as `[(ky * 3 + kx) * c + ch]`.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != h * w {
            return Err(dim_err!("im2col: {r} rows for a {h}x{w} grid"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; r * 9 * c];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let q = sy as usize * w + sx as usize;
                        let dst = p * 9 * c + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&src[q * c..(q + 1) * c]);
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, 9 * c, out), Op::Im2Col { a, h, w }, ng)
    }

    /// Mean binary cross-entropy between probabilities and `{0,1}` targets,
    /// with probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce_mean(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(dim_err!("bce: {} predictions vs {} targets", p.len(), target.len()));
        }
        if p.is_empty() {
            return Err(dim_err!("bce over empty prediction"));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&pi, &y)| {
                let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Sum of `[1, 1]` scalars with weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| dim_err!("weighted_sum of nothing"))
    }

    /// Backpropagates from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(dim_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.push_back(idx, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.bound.clone(),
        })
    }

    fn push_back(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        let (r, c) = (val.rows(), val.cols());
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Input => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let dmat = MatRef::new(dy, r, c, false);
                let dmat_t = MatRef::new(dy, r, c, true);
                acc(a, &mut |ga| {
                    let b_t = MatRef::new(bv.data(), bv.rows(), bv.cols(), !tb);
                    let b_n = MatRef::new(bv.data(), bv.rows(), bv.cols(), tb);
                    if ta {
                        dgemm(b_n, dmat_t, 1.0, ga);
                    } else {
                        dgemm(dmat, b_t, 1.0, ga);
                    }
                });
                acc(b, &mut |gb| {
                    let a_t = MatRef::new(av.data(), av.rows(), av.cols(), !ta);
                    let a_n = MatRef::new(av.data(), av.rows(), av.cols(), ta);
                    if tb {
                        dgemm(dmat_t, a_n, 1.0, gb);
                    } else {
                        dgemm(a_t, dmat, 1.0, gb);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*row, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j];
                        }
                    }
                });
            }
            Op::MulRows(a, col) => {
                let av = nodes[a.0].value.data();
                let cv = nodes[col.0].value.data();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[i * c + j] * cv[i];
                        }
                    }
                });
                acc(*col, &mut |g| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += dy[i * c + j] * av[i * c + j];
                        }
                        g[i] += s;
                    }
                });
            }
            Op::Affine(a, s) => {
                let s = *s;
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += s * d));
            }
            Op::Sigmoid(a) => {
                let y = val.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = val.data();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = dy[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(d, p)| d * p)
                            .sum();
                        for k in row {
                            g[k] += y[k] * (dy[k] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j];
                        }
                    }
                });
                acc(*x, &mut |g| {
                    let cf = c as f64;
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[i * c + j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            g[i * c + j] += rstd[i] * (dh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |g| add_into(g, &dy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start * c;
                acc(*a, &mut |g| add_into(&mut g[start..start + dy.len()], dy));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    acc(p, &mut |g| {
                        for i in 0..r {
                            add_into(
                                &mut g[i * pc..(i + 1) * pc],
                                &dy[i * c + offset..i * c + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = nodes[a.0].value.cols();
                let start = *start;
                acc(*a, &mut |g| {
                    for i in 0..r {
                        add_into(
                            &mut g[i * ac + start..i * ac + start + c],
                            &dy[i * c..(i + 1) * c],
                        );
                    }
                });
            }
            Op::MeanRows(a) => {
                let ar = nodes[a.0].value.rows();
                let inv = 1.0 / ar as f64;
                acc(*a, &mut |g| {
                    for i in 0..ar {
                        for j in 0..c {
                            g[i * c + j] += dy[j] * inv;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::Transpose(a) => {
                acc(*a, &mut |g| {
                    // value is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += dy[i * c + j];
                        }
                    }
                });
            }
            Op::Im2Col { a, h, w } => {
                let (h, w) = (*h, *w);
                let ch = c / 9;
                acc(*a, &mut |g| {
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = x as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let q = sy as usize * w + sx as usize;
                                    let src = p * 9 * ch + (ky * 3 + kx) * ch;
                                    add_into(&mut g[q * ch..(q + 1) * ch], &dy[src..src + ch]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Bce { pred, target } => {
                let p = nodes[pred.0].value.data();
                let n = p.len() as f64;
                let d = dy[0];
                acc(*pred, &mut |g| {
                    for i in 0..g.len() {
                        let pi = p[i];
                        if pi <= BCE_CLAMP || pi >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        g[i] += d * (pi - target[i]) / (pi * (1.0 - pi)) / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRows(..) => "mul_rows",
        Op::Affine(..) => "affine",
        Op::Sigmoid(_) => "sigmoid",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::MeanRows(_) => "mean_rows",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::Im2Col { .. } => "im2col",
        Op::Bce { .. } => "bce",
    }
}
