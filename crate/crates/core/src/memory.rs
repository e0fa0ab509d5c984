//! Fixed-capacity global and local memories with gated writes and
//! attention reads.
//!
//! Write controllers store `W_c` transposed, as `[in + D, D]`, so a
//! candidate is the row product `[x_p, AP(M)] · W_c`. The gate weight `W_o`
//! is `[D, D]` and scores `c_p · W_o · m_nᵀ`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{attend, Graph, Init, ParamTree, Tensor, Var};

pub const GLOBAL: &str = "memory.global";
pub const LOCAL: &str = "memory.local";
pub const MASK: &str = "memory.mask";

/// Gate override used to probe the controller identities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gate {
    #[default]
    Learned,
    /// Every gate forced to 0.
    Closed,
    /// Every gate forced to 1.
    Open,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMemory {
    /// `[N_g, D]`; zero rows when the memory is disabled.
    pub cells: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalMemory {
    /// `[N_l, D]`.
    pub cells: Tensor,
    /// Index of the frame this state is read by.
    pub frame_index: usize,
}

impl GlobalMemory {
    pub fn initial(params: &ParamTree, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            cells: init_cells(params, GLOBAL, cfg.global_cells(), cfg.dim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LocalMemory {
    pub fn initial(params: &ParamTree, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            cells: init_cells(params, LOCAL, cfg.local_cells(), cfg.dim)?,
            frame_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn init_cells(params: &ParamTree, prefix: &str, n: usize, d: usize) -> Result<Tensor> {
    if n == 0 {
        return Ok(Tensor::zeros(&[0, d]));
    }
    let t = params
        .get(&format!("{prefix}.init"))
        .ok_or_else(|| Error::Config(format!("missing {prefix}.init")))?;
    if t.shape() != [n, d] {
        return Err(dim_err!("{prefix}.init is {:?}, expected [{n}, {d}]", t.shape()));
    }
    Ok(t.clone())
}

pub fn init<R: Rng>(cfg: &ModelConfig, init: &mut Init<'_, R>) -> Result<()> {
    let d = cfg.dim;
    if cfg.global_cells() > 0 {
        init.weight(&format!("{GLOBAL}.wc"), 2 * d, d)?;
        init.weight(&format!("{GLOBAL}.wo"), d, d)?;
        init.normal(&format!("{GLOBAL}.init"), &[cfg.global_cells(), d], 1.0)?;
    }
    if cfg.local_cells() > 0 {
        init.weight(&format!("{LOCAL}.wc"), 3 * d, d)?;
        init.weight(&format!("{LOCAL}.wo"), d, d)?;
        init.normal(&format!("{LOCAL}.init"), &[cfg.local_cells(), d], 1.0)?;
        let h = d / 2;
        init.weight(&format!("{MASK}.conv1.w"), 9, h)?;
        init.zeros(&format!("{MASK}.conv1.b"), &[1, h])?;
        init.weight(&format!("{MASK}.conv2.w"), 9 * h, d)?;
        init.zeros(&format!("{MASK}.conv2.b"), &[1, d])?;
    }
    Ok(())
}

/// Frames folded into the global memory: `0, interval, 2 * interval, ...`.
pub fn sampled_frames(n_frames: usize, interval: usize) -> Result<Vec<usize>> {
    if interval == 0 {
        return Err(Error::Config("sampling interval must be >= 1".into()));
    }
    if n_frames == 0 {
        return Err(Error::Input("video has no frames".into()));
    }
    Ok((0..n_frames).step_by(interval).collect())
}

fn candidates(g: &mut Graph, prefix: &str, input: Var, cells: Var) -> Result<Var> {
    let (nv, din) = g.shape(input);
    let (n, d) = g.shape(cells);
    let wc = g.param(&format!("{prefix}.wc"))?;
    if g.shape(wc) != (din + d, d) {
        return Err(dim_err!(
            "{prefix}.wc is {:?}, expected [{}, {d}]",
            g.shape(wc),
            din + d
        ));
    }
    if nv == 0 || n == 0 {
        return Err(dim_err!("write with {nv} patches into {n} cells"));
    }
    let w_in = g.slice_rows(wc, 0, din)?;
    let w_mem = g.slice_rows(wc, din, d)?;
    let ap = g.mean_rows(cells)?;
    let shared = g.matmul(ap, w_mem)?;
    let c = g.matmul(input, w_in)?;
    g.add_row(c, shared)
}

fn learned_gates(g: &mut Graph, prefix: &str, cells: Var, c: Var) -> Result<Var> {
    let wo = g.param(&format!("{prefix}.wo"))?;
    let t = g.matmul_t(cells, false, wo, true)?;
    let s = g.matmul_t(t, false, c, true)?;
    g.sigmoid(s)
}

/// One synchronous gated write. `input` is `[N_v, in]`, `cells` `[N, D]`;
/// all cells see the pre-update average `AP(cells)`.
pub fn write_node(g: &mut Graph, prefix: &str, input: Var, cells: Var, gate: Gate) -> Result<Var> {
    let c = candidates(g, prefix, input, cells)?;
    let (nv, _) = g.shape(input);
    let (n, _) = g.shape(cells);
    let o = match gate {
        Gate::Learned => learned_gates(g, prefix, cells, c)?,
        Gate::Closed => g.constant(Tensor::zeros(&[n, nv]))?,
        Gate::Open => g.constant(Tensor::full(&[n, nv], 1.0))?,
    };
    let mix = g.matmul(o, c)?;
    let mix = g.scale(mix, 1.0 / nv as f64)?;
    let avg = g.constant(Tensor::full(&[nv, 1], 1.0 / nv as f64))?;
    let gate_mean = g.matmul(o, avg)?;
    let keep = g.affine(gate_mean, -1.0, 1.0)?;
    let kept = g.mul_rows(cells, keep)?;
    g.add(mix, kept)
}

/// Gate matrix `[N, N_v]` of a learned write, for inspection.
pub fn gate_values(
    input: &Tensor,
    cells: &Tensor,
    prefix: &str,
    params: &ParamTree,
) -> Result<Tensor> {
    let mut g = Graph::inference(params);
    let x = g.constant(input.clone())?;
    let m = g.constant(cells.clone())?;
    let c = candidates(&mut g, prefix, x, m)?;
    let o = learned_gates(&mut g, prefix, m, c)?;
    Ok(g.value(o).clone())
}

pub fn global_write(
    v: &Tensor,
    mem: &GlobalMemory,
    params: &ParamTree,
    gate: Gate,
) -> Result<GlobalMemory> {
    let mut g = Graph::inference(params);
    let x = g.constant(v.clone())?;
    let m = g.constant(mem.cells.clone())?;
    let out = write_node(&mut g, GLOBAL, x, m, gate)?;
    Ok(GlobalMemory {
        cells: g.value(out).clone(),
    })
}

/// Starts from the learned initial cells and writes the sampled frames in
/// temporal order.
pub fn build_global_memory(
    features: &[Tensor],
    interval: usize,
    params: &ParamTree,
    cfg: &ModelConfig,
) -> Result<GlobalMemory> {
    let frames = sampled_frames(features.len(), interval)?;
    let mut mem = GlobalMemory::initial(params, cfg)?;
    if mem.is_empty() {
        return Ok(mem);
    }
    for t in frames {
        mem = global_write(&features[t], &mem, params, Gate::Learned)?;
    }
    Ok(mem)
}

/// Two 3×3 convolutions over the patch grid (`1 → D/2 → D` channels, GELU
/// between). `probs` is `[N_v, 1]` in grid row-major order.
pub fn mask_embed_node(g: &mut Graph, probs: Var, grid: (usize, usize)) -> Result<Var> {
    let (gw, gh) = grid;
    let cols = g.im2col3(probs, gh, gw)?;
    let w1 = g.param(&format!("{MASK}.conv1.w"))?;
    let b1 = g.param(&format!("{MASK}.conv1.b"))?;
    let h = g.matmul(cols, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let cols = g.im2col3(h, gh, gw)?;
    let w2 = g.param(&format!("{MASK}.conv2.w"))?;
    let b2 = g.param(&format!("{MASK}.conv2.b"))?;
    let s = g.matmul(cols, w2)?;
    g.add_row(s, b2)
}

fn check_probs(mask: &[f64]) -> Result<()> {
    if let Some(bad) = mask.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Input(format!("mask probability {bad} outside [0, 1]")));
    }
    Ok(())
}

pub fn mask_embed(mask_probs: &[f64], grid: (usize, usize), params: &ParamTree) -> Result<Tensor> {
    check_probs(mask_probs)?;
    if mask_probs.len() != grid.0 * grid.1 {
        return Err(dim_err!("{} mask entries for a {grid:?} grid", mask_probs.len()));
    }
    let mut g = Graph::inference(params);
    let p = g.constant(Tensor::matrix(mask_probs.len(), 1, mask_probs.to_vec()))?;
    let s = mask_embed_node(&mut g, p, grid)?;
    Ok(g.value(s).clone())
}

/// Folds frame `prev_index` (features and predicted mask) into the local
/// memory read by frame `prev_index + 1`.
pub fn local_write(
    v_prev: &Tensor,
    mask_prev: &[f64],
    prev_index: usize,
    mem: &LocalMemory,
    grid: (usize, usize),
    params: &ParamTree,
    gate: Gate,
) -> Result<LocalMemory> {
    if prev_index != mem.frame_index {
        return Err(Error::Sequencing {
            expected: mem.frame_index,
            got: prev_index,
        });
    }
    check_probs(mask_prev)?;
    if mask_prev.len() != v_prev.rows() {
        return Err(dim_err!(
            "{} mask entries for {} patches",
            mask_prev.len(),
            v_prev.rows()
        ));
    }
    let mut g = Graph::inference(params);
    let v = g.constant(v_prev.clone())?;
    let p = g.constant(Tensor::matrix(mask_prev.len(), 1, mask_prev.to_vec()))?;
    let s = mask_embed_node(&mut g, p, grid)?;
    let x = g.concat_cols(&[v, s])?;
    let m = g.constant(mem.cells.clone())?;
    let out = write_node(&mut g, LOCAL, x, m, gate)?;
    Ok(LocalMemory {
        cells: g.value(out).clone(),
        frame_index: mem.frame_index + 1,
    })
}

/// `G = V + ATT(V, M_g, M_g) + ATT(V, M_l, M_l)`; absent memories add
/// nothing.
pub fn read_node(g: &mut Graph, v: Var, global: Option<Var>, local: Option<Var>) -> Result<Var> {
    let mut out = v;
    for m in [global, local].into_iter().flatten() {
        let ctx = attend(g, v, m, m, None)?;
        out = g.add(out, ctx)?;
    }
    Ok(out)
}

pub fn read(v: &Tensor, global: &GlobalMemory, local: &LocalMemory) -> Result<Tensor> {
    let mut g = Graph::new();
    let vv = g.constant(v.clone())?;
    let gm = if global.is_empty() {
        None
    } else {
        Some(g.constant(global.cells.clone())?)
    };
    let lm = if local.is_empty() {
        None
    } else {
        Some(g.constant(local.cells.clone())?)
    };
    let out = read_node(&mut g, vv, gm, lm)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            frame_width: 32,
            frame_height: 32,
            ..ModelConfig::toy()
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ParamTree {
        let mut tree = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init(cfg, &mut Init { tree: &mut tree, rng: &mut rng }).unwrap();
        tree
    }

    fn randm(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[r, c], 1.0, &mut rng)
    }

    #[test]
    fn closed_gate_is_a_fixed_point() {
        let c = cfg();
        let p = params(&c, 1);
        let gm = GlobalMemory::initial(&p, &c).unwrap();
        let v = randm(16, 8, 2);
        let out = global_write(&v, &gm, &p, Gate::Closed).unwrap();
        assert!(out.cells.max_abs_diff(&gm.cells) <= 1e-12);

        let lm = LocalMemory::initial(&p, &c).unwrap();
        let mask = vec![0.25; 16];
        let next = local_write(&v, &mask, 0, &lm, (4, 4), &p, Gate::Closed).unwrap();
        assert!(next.cells.max_abs_diff(&lm.cells) <= 1e-12);
        assert_eq!(next.frame_index, 1);
    }

    #[test]
    fn open_gate_collapses_to_mean_candidate() {
        let c = cfg();
        let p = params(&c, 3);
        let gm = GlobalMemory::initial(&p, &c).unwrap();
        let v = randm(16, 8, 4);
        let out = global_write(&v, &gm, &p, Gate::Open).unwrap();
        // mean candidate computed directly
        let wc = p.get("memory.global.wc").unwrap();
        let ap = gm.cells.mean_rows();
        let mut mean_c = vec![0.0; 8];
        for r in 0..16 {
            let x: Vec<f64> = v.row(r).iter().chain(ap.row(0)).copied().collect();
            for j in 0..8 {
                mean_c[j] += (0..16).map(|i| x[i] * wc.at(i, j)).sum::<f64>() / 16.0;
            }
        }
        for n in 0..gm.len() {
            for j in 0..8 {
                assert!((out.cells.at(n, j) - mean_c[j]).abs() < 1e-12);
            }
        }
    }

    /// Scalar transcription of the gated write over explicit loops.
    fn scalar_write(x: &[Vec<f64>], m: &[Vec<f64>], wc: &[Vec<f64>], wo: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = m[0].len();
        let np = x.len();
        let ap: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect();
        // wc is D x (in + D) in column-vector convention
        let cand: Vec<Vec<f64>> = x
            .iter()
            .map(|xp| {
                let z: Vec<f64> = xp.iter().chain(&ap).copied().collect();
                (0..d).map(|i| (0..z.len()).map(|k| wc[i][k] * z[k]).sum()).collect()
            })
            .collect();
        m.iter()
            .map(|mn| {
                let mut acc = vec![0.0; d];
                for cp in &cand {
                    let mut s = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            s += cp[i] * wo[i][j] * mn[j];
                        }
                    }
                    let o = 1.0 / (1.0 + (-s).exp());
                    for j in 0..d {
                        acc[j] += (o * cp[j] + (1.0 - o) * mn[j]) / np as f64;
                    }
                }
                acc
            })
            .collect()
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn global_write_matches_scalar_transcription() {
        // D = 2, N_v = 2, N_g = 1
        let wc_cv = vec![vec![0.5, -0.3, 0.2, 0.1], vec![-0.4, 0.7, 0.0, 0.6]];
        let wo = vec![vec![0.9, -0.2], vec![0.3, 0.4]];
        let mut p = ParamTree::new();
        p.insert("memory.global.wc", Tensor::from_rows(&[&[0.5, -0.4], &[-0.3, 0.7], &[0.2, 0.0], &[0.1, 0.6]]).unwrap()).unwrap();
        p.insert("memory.global.wo", Tensor::from_rows(&[&[0.9, -0.2], &[0.3, 0.4]]).unwrap()).unwrap();
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[-1.5, 0.5]]).unwrap();
        let m = Tensor::from_rows(&[&[0.3, -0.8]]).unwrap();
        let out = global_write(&v, &GlobalMemory { cells: m.clone() }, &p, Gate::Learned).unwrap();
        let expected = scalar_write(&to_rows(&v), &to_rows(&m), &wc_cv, &wo);
        for j in 0..2 {
            assert!((out.cells.at(0, j) - expected[0][j]).abs() < 1e-10);
        }
    }

    #[test]
    fn local_write_matches_scalar_transcription() {
        // D = 2, N_v = 1, N_l = 1 on a 1x1 grid
        let mut p = ParamTree::new();
        p.insert("memory.mask.conv1.w", Tensor::matrix(9, 1, vec![0.1, 0.2, 0.3, 0.4, 0.8, 0.6, 0.7, 0.8, 0.9])).unwrap();
        p.insert("memory.mask.conv1.b", Tensor::matrix(1, 1, vec![0.05])).unwrap();
        let mut w2 = vec![0.0; 18];
        // only the centre tap sees data on a 1x1 grid
        w2[8] = 1.5;
        w2[9] = -0.5;
        w2[0] = 9.0;
        p.insert("memory.mask.conv2.w", Tensor::matrix(9, 2, w2)).unwrap();
        p.insert("memory.mask.conv2.b", Tensor::matrix(1, 2, vec![0.1, -0.2])).unwrap();
        let wc_rows: [[f64; 2]; 6] = [[0.5, -0.1], [0.2, 0.3], [-0.6, 0.4], [0.1, 0.9], [0.3, -0.2], [0.0, 0.5]];
        let flat: Vec<f64> = wc_rows.iter().flatten().copied().collect();
        p.insert("memory.local.wc", Tensor::matrix(6, 2, flat)).unwrap();
        p.insert("memory.local.wo", Tensor::from_rows(&[&[0.7, 0.1], &[-0.3, 0.5]]).unwrap()).unwrap();

        let v = Tensor::from_rows(&[&[0.4, -1.1]]).unwrap();
        let m = Tensor::from_rows(&[&[1.2, 0.3]]).unwrap();
        let prob = 0.7;
        let mem = LocalMemory { cells: m.clone(), frame_index: 5 };
        let out = local_write(&v, &[prob], 5, &mem, (1, 1), &p, Gate::Learned).unwrap();

        // s = conv2(gelu(conv1(prob))) at the centre tap
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
        let hv = gelu(0.8 * prob + 0.05);
        let s = [1.5 * hv + 0.1, -0.5 * hv - 0.2];
        let x = vec![vec![0.4, -1.1, s[0], s[1]]];
        let wc_cv: Vec<Vec<f64>> = (0..2).map(|i| wc_rows.iter().map(|r| r[i]).collect()).collect();
        let wo = vec![vec![0.7, 0.1], vec![-0.3, 0.5]];
        let expected = scalar_write(&x, &to_rows(&m), &wc_cv, &wo);
        for j in 0..2 {
            assert!((out.cells.at(0, j) - expected[0][j]).abs() < 1e-10);
        }
        assert_eq!(out.frame_index, 6);
    }

    #[test]
    fn skipped_frame_is_a_sequencing_error() {
        let c = cfg();
        let p = params(&c, 5);
        let lm = LocalMemory::initial(&p, &c).unwrap();
        let v = randm(16, 8, 6);
        let err = local_write(&v, &[0.0; 16], 1, &lm, (4, 4), &p, Gate::Learned);
        assert!(matches!(err, Err(Error::Sequencing { expected: 0, got: 1 })));
        let bad = local_write(&v, &[1.5; 16], 0, &lm, (4, 4), &p, Gate::Learned);
        assert!(matches!(bad, Err(Error::Input(_))));
    }

    #[test]
    fn capacities_follow_patch_count() {
        let c = cfg();
        let p = params(&c, 7);
        assert_eq!(GlobalMemory::initial(&p, &c).unwrap().len(), 24);
        assert_eq!(LocalMemory::initial(&p, &c).unwrap().len(), 32);
        for n in [5, 500] {
            let feats: Vec<Tensor> = (0..n).map(|i| randm(16, 8, i as u64)).collect();
            let gm = build_global_memory(&feats, 10, &p, &c).unwrap();
            assert_eq!(gm.len(), c.global_cells());
        }
    }

    #[test]
    fn build_writes_sampled_frames_in_order() {
        let c = cfg();
        let p = params(&c, 8);
        assert_eq!(sampled_frames(30, 10).unwrap(), vec![0, 10, 20]);
        assert_eq!(sampled_frames(1, 10).unwrap(), vec![0]);
        assert!(matches!(sampled_frames(0, 10), Err(Error::Input(_))));
        let feats: Vec<Tensor> = (0..30).map(|i| randm(16, 8, 100 + i)).collect();
        let built = build_global_memory(&feats, 10, &p, &c).unwrap();
        let mut manual = GlobalMemory::initial(&p, &c).unwrap();
        for t in [0, 10, 20] {
            manual = global_write(&feats[t], &manual, &p, Gate::Learned).unwrap();
        }
        assert_eq!(built, manual);
        assert!(matches!(build_global_memory(&[], 10, &p, &c), Err(Error::Input(_))));
    }

    #[test]
    fn gates_stay_inside_unit_interval() {
        let c = cfg();
        let p = params(&c, 9);
        let gm = GlobalMemory::initial(&p, &c).unwrap();
        let o = gate_values(&randm(16, 8, 10), &gm.cells, GLOBAL, &p).unwrap();
        assert!(o.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn mask_embedding_shape_and_response() {
        let c = ModelConfig { dim: 16, ..cfg() };
        let p = params(&c, 11);
        let grid = (8, 8);
        let zero = mask_embed(&[0.0; 64], grid, &p).unwrap();
        let one = mask_embed(&[1.0; 64], grid, &p).unwrap();
        assert_eq!(zero.shape(), [64, 16]);
        assert!(zero.max_abs_diff(&one) > 1e-3);
        assert!(mask_embed(&[0.0; 63], grid, &p).is_err());
    }

    /// Direct two-layer 3x3 convolution with zero padding.
    fn conv_oracle(mask: &[f64], h: usize, w: usize, p: &ParamTree) -> Vec<Vec<f64>> {
        let w1 = p.get("memory.mask.conv1.w").unwrap();
        let b1 = p.get("memory.mask.conv1.b").unwrap();
        let w2 = p.get("memory.mask.conv2.w").unwrap();
        let b2 = p.get("memory.mask.conv2.b").unwrap();
        let c1 = w1.cols();
        let c2 = w2.cols();
        let at = |y: isize, x: isize| -> Option<usize> {
            (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize)
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
        let mut hid = vec![vec![0.0; c1]; h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c1 {
                    let mut s = b1.at(0, ch);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some(q) = at(y as isize + ky - 1, x as isize + kx - 1) {
                                s += mask[q] * w1.at((ky * 3 + kx) as usize, ch);
                            }
                        }
                    }
                    hid[y * w + x][ch] = gelu(s);
                }
            }
        }
        let mut out = vec![vec![0.0; c2]; h * w];
        for y in 0..h {
            for x in 0..w {
                for o in 0..c2 {
                    let mut s = b2.at(0, o);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some(q) = at(y as isize + ky - 1, x as isize + kx - 1) {
                                for ch in 0..c1 {
                                    s += hid[q][ch] * w2.at((ky * 3 + kx) as usize * c1 + ch, o);
                                }
                            }
                        }
                    }
                    out[y * w + x][o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn mask_embedding_matches_direct_convolution_under_shift() {
        let c = cfg();
        let mut p = params(&c, 12);
        for key in ["memory.mask.conv1.b", "memory.mask.conv2.b"] {
            let t = p.get_mut(key).unwrap();
            let n = t.len();
            t.data_mut().copy_from_slice(&(0..n).map(|i| 0.1 * i as f64 - 0.2).collect::<Vec<_>>());
        }
        let mut a = vec![0.0; 9];
        a[3] = 1.0; // (1, 0)
        let mut b = vec![0.0; 9];
        b[4] = 1.0; // shifted one column right
        for mask in [&a, &b] {
            let got = mask_embed(mask, (3, 3), &p).unwrap();
            let want = conv_oracle(mask, 3, 3, &p);
            for (r, row) in want.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((got.at(r, j) - v).abs() < 1e-12);
                }
            }
        }
        // away from the border and with zero biases the map is shift-equivariant
        let mut p0 = p.clone();
        for key in ["memory.mask.conv1.b", "memory.mask.conv2.b"] {
            let t = p0.get_mut(key).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut a = vec![0.0; 49];
        a[3 * 7 + 2] = 1.0;
        let mut b = vec![0.0; 49];
        b[3 * 7 + 3] = 1.0;
        let ea = mask_embed(&a, (7, 7), &p0).unwrap();
        let eb = mask_embed(&b, (7, 7), &p0).unwrap();
        for y in 1..6 {
            for x in 0..5 {
                let ra = ea.row(y * 7 + x);
                let rb = eb.row(y * 7 + x + 1);
                for (u, v) in ra.iter().zip(rb) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn read_of_zero_memory_is_identity() {
        let v = randm(16, 8, 13);
        let g = GlobalMemory { cells: Tensor::zeros(&[24, 8]) };
        let l = LocalMemory { cells: Tensor::zeros(&[32, 8]), frame_index: 3 };
        assert_eq!(read(&v, &g, &l).unwrap(), v);
        let empty_g = GlobalMemory { cells: Tensor::zeros(&[0, 8]) };
        let empty_l = LocalMemory { cells: Tensor::zeros(&[0, 8]), frame_index: 0 };
        assert_eq!(read(&v, &empty_g, &empty_l).unwrap(), v);
    }

    #[test]
    fn read_matches_scalar_transcription() {
        let v = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]).unwrap();
        let gcells = Tensor::from_rows(&[&[1.0, 0.0], &[0.3, -0.7]]).unwrap();
        let lcells = Tensor::from_rows(&[&[-0.2, 0.9], &[0.6, 0.6]]).unwrap();
        let out = read(
            &v,
            &GlobalMemory { cells: gcells.clone() },
            &LocalMemory { cells: lcells.clone(), frame_index: 0 },
        )
        .unwrap();
        let att = |q: &[f64], m: &Tensor| -> Vec<f64> {
            let s: Vec<f64> = (0..m.rows())
                .map(|n| (q[0] * m.at(n, 0) + q[1] * m.at(n, 1)) / 2f64.sqrt())
                .collect();
            let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            (0..2).map(|j| (0..m.rows()).map(|n| e[n] / z * m.at(n, j)).sum()).collect()
        };
        for r in 0..2 {
            let cg = att(v.row(r), &gcells);
            let cl = att(v.row(r), &lcells);
            for j in 0..2 {
                assert!((out.at(r, j) - (v.at(r, j) + cg[j] + cl[j])).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn read_ignores_global_cell_order(seed in 0u64..1000, shift in 1usize..24) {
            let v = randm(16, 8, seed);
            let cells = randm(24, 8, seed + 1);
            let mut perm = Vec::with_capacity(24 * 8);
            for n in 0..24 {
                perm.extend_from_slice(cells.row((n + shift) % 24));
            }
            let l = LocalMemory { cells: randm(32, 8, seed + 2), frame_index: 0 };
            let a = read(&v, &GlobalMemory { cells }, &l).unwrap();
            let b = read(&v, &GlobalMemory { cells: Tensor::matrix(24, 8, perm) }, &l).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
