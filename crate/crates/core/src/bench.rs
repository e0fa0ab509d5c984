//! Per-frame cost of flattened full self-attention versus the memory
//! pipeline, timed with single-precision kernels.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::gemm::{sgemm, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Memory,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Memory => "memory",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub n_frames: usize,
    pub ms_per_frame: f64,
    pub peak_context_vectors: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub trials: usize,
    /// Fraction dropped from each end before averaging.
    pub trim: f64,
    pub global_ratio: f64,
    pub local_ratio: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 5,
            trials: 10,
            trim: 0.2,
            global_ratio: 1.5,
            local_ratio: 2.0,
        }
    }
}

impl BenchOptions {
    pub fn with_trials(trials: usize) -> Self {
        Self {
            trials,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials < 3 {
            return Err(Error::Config(format!("need at least 3 trials, got {}", self.trials)));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config("trim must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn memory_cells(&self, tokens: usize) -> (usize, usize) {
        (
            (self.global_ratio * tokens as f64).round() as usize,
            (self.local_ratio * tokens as f64).round() as usize,
        )
    }
}

fn matmul(a: &[f32], ar: usize, ac: usize, at: bool, b: &[f32], br: usize, bc: usize, bt: bool, out: &mut [f32]) {
    sgemm(MatRef::new(a, ar, ac, at), MatRef::new(b, br, bc, bt), 0.0, out);
}

fn layer_norm(x: &mut [f32], d: usize) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

fn gelu(x: &mut [f32]) {
    const C: f32 = 0.797_884_6;
    for v in x {
        *v = 0.5 * *v * (1.0 + (C * (*v + 0.044_715 * *v * *v * *v)).tanh());
    }
}

fn softmax_rows(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Query rows per score block, bounding scratch memory for long sequences.
const CHUNK: usize = 256;

/// `softmax(q kᵀ / sqrt(d)) v` for `nq` queries over `nk` keys, adding the
/// result into `out`. Performs exactly `2 nq nk d` multiply-accumulates.
pub fn attention_f32(q: &[f32], nq: usize, k: &[f32], v: &[f32], nk: usize, d: usize, out: &mut [f32]) {
    let scale = 1.0 / (d as f32).sqrt();
    let mut scores = vec![0.0f32; CHUNK.min(nq) * nk];
    let mut part = vec![0.0f32; CHUNK.min(nq) * d];
    for start in (0..nq).step_by(CHUNK) {
        let rows = CHUNK.min(nq - start);
        let s = &mut scores[..rows * nk];
        matmul(&q[start * d..(start + rows) * d], rows, d, false, k, nk, d, true, s);
        s.iter_mut().for_each(|x| *x *= scale);
        softmax_rows(s, nk);
        let p = &mut part[..rows * d];
        matmul(s, rows, nk, false, v, nk, d, false, p);
        for (o, x) in out[start * d..(start + rows) * d].iter_mut().zip(p.iter()) {
            *o += x;
        }
    }
}

/// Weights of one post-norm encoder block of width `d`.
struct BlockWeights {
    d: usize,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

fn random<R: Rng>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| (rng.random::<f32>() - 0.5) * 2.0 * std).collect()
}

impl BlockWeights {
    fn new<R: Rng>(rng: &mut R, d: usize) -> Self {
        let s = 1.0 / (d as f32).sqrt();
        Self {
            d,
            wq: random(rng, d * d, s),
            wk: random(rng, d * d, s),
            wv: random(rng, d * d, s),
            wo: random(rng, d * d, s),
            w1: random(rng, d * 4 * d, s),
            w2: random(rng, 4 * d * d, s * 0.5),
        }
    }

    /// Self-attention plus MLP over all `n` rows of `x`, in place.
    fn forward(&self, x: &mut [f32], n: usize) {
        let d = self.d;
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        matmul(x, n, d, false, &self.wq, d, d, false, &mut q);
        matmul(x, n, d, false, &self.wk, d, d, false, &mut k);
        matmul(x, n, d, false, &self.wv, d, d, false, &mut v);
        let mut ctx = vec![0.0; n * d];
        attention_f32(&q, n, &k, &v, n, d, &mut ctx);
        let mut proj = vec![0.0; n * d];
        matmul(&ctx, n, d, false, &self.wo, d, d, false, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        layer_norm(x, d);
        let mut hidden = vec![0.0; n * 4 * d];
        matmul(x, n, d, false, &self.w1, d, 4 * d, false, &mut hidden);
        gelu(&mut hidden);
        matmul(&hidden, n, 4 * d, false, &self.w2, 4 * d, d, false, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        layer_norm(x, d);
    }
}

/// Analytic multiply-accumulates of one block over `n` tokens of width `d`.
pub fn block_macs(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    4 * n * d * d + 2 * n * n * d + 8 * n * d * d
}

/// Cell update of a memory of `cells` rows from `tokens` rows of input.
struct MemoryWeights {
    wc: Vec<f32>,
    wo: Vec<f32>,
}

fn memory_write(x: &[f32], tokens: usize, mem: &mut [f32], cells: usize, d: usize, w: &MemoryWeights) {
    // candidates from the input and the pooled memory
    let mut pooled = vec![0.0f32; d];
    for row in mem.chunks(d) {
        pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v / cells as f32);
    }
    let mut input = vec![0.0f32; tokens * 2 * d];
    for (t, row) in input.chunks_mut(2 * d).enumerate() {
        row[..d].copy_from_slice(&x[t * d..(t + 1) * d]);
        row[d..].copy_from_slice(&pooled);
    }
    let mut c = vec![0.0; tokens * d];
    matmul(&input, tokens, 2 * d, false, &w.wc, 2 * d, d, false, &mut c);
    let mut cw = vec![0.0; tokens * d];
    matmul(&c, tokens, d, false, &w.wo, d, d, false, &mut cw);
    let mut gates = vec![0.0; tokens * cells];
    matmul(&cw, tokens, d, false, mem, cells, d, true, &mut gates);
    gates.iter_mut().for_each(|g| *g = 1.0 / (1.0 + (-*g).exp()));
    let mut cand = vec![0.0; cells * d];
    matmul(&gates, tokens, cells, true, &c, tokens, d, false, &mut cand);
    for (j, row) in mem.chunks_mut(d).enumerate() {
        let keep = 1.0 - (0..tokens).map(|t| gates[t * cells + j]).sum::<f32>() / tokens as f32;
        for (m, cv) in row.iter_mut().zip(&cand[j * d..(j + 1) * d]) {
            *m = cv / tokens as f32 + *m * keep;
        }
    }
}

struct MemoryPipeline {
    block: BlockWeights,
    write: MemoryWeights,
    global: Vec<f32>,
    local: Vec<f32>,
    tokens: usize,
    d: usize,
}

impl MemoryPipeline {
    fn new<R: Rng>(rng: &mut R, tokens: usize, d: usize, opts: &BenchOptions) -> Self {
        let (ng, nl) = opts.memory_cells(tokens);
        let s = 1.0 / (d as f32).sqrt();
        Self {
            block: BlockWeights::new(rng, d),
            write: MemoryWeights {
                wc: random(rng, 2 * d * d, s),
                wo: random(rng, d * d, s),
            },
            global: random(rng, ng * d, 1.0),
            local: random(rng, nl * d, 1.0),
            tokens,
            d,
        }
    }

    fn context_vectors(&self) -> usize {
        (self.global.len() + self.local.len()) / self.d
    }

    /// Encode one frame, write it into the local memory, read both memories.
    fn frame(&mut self, x: &mut [f32]) {
        let (t, d) = (self.tokens, self.d);
        self.block.forward(x, t);
        let cells = self.local.len() / d;
        memory_write(x, t, &mut self.local, cells, d, &self.write);
        let mut out = x.to_vec();
        attention_f32(x, t, &self.global, &self.global, self.global.len() / d, d, &mut out);
        attention_f32(x, t, &self.local, &self.local, cells, d, &mut out);
        x.copy_from_slice(&out);
    }
}

fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Mean after dropping `trim` of the samples from each end.
pub fn trimmed_mean(samples: &[f64], trim: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let cut = (s.len() as f64 * trim).floor() as usize;
    let kept = &s[cut..s.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn time_trials(opts: &BenchOptions, mut run: impl FnMut()) -> Result<Vec<f64>> {
    for _ in 0..opts.warmup {
        run();
    }
    let times: Vec<Duration> = (0..opts.trials)
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed()
        })
        .collect();
    let resolution = timer_resolution();
    let fastest = times.iter().min().copied().unwrap_or_default();
    if fastest < resolution * 100 {
        return Err(Error::Calibration(format!(
            "trial took {fastest:?}, under 100 timer ticks of {resolution:?}"
        )));
    }
    Ok(times.iter().map(|t| t.as_secs_f64() * 1e3).collect())
}

fn check_shape(n_frames: usize, tokens: usize, d: usize) -> Result<()> {
    if n_frames == 0 || tokens == 0 || d == 0 {
        return Err(Error::Config("frames, tokens and width must be positive".into()));
    }
    Ok(())
}

/// One encoder block over all `n_frames * tokens` tokens at once.
pub fn bench_full(n_frames: usize, tokens: usize, d: usize, opts: &BenchOptions) -> Result<BenchRow> {
    opts.validate()?;
    check_shape(n_frames, tokens, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = n_frames * tokens;
    let block = BlockWeights::new(&mut rng, d);
    let input = random(&mut rng, n * d, 1.0);
    let mut x = input.clone();
    let times = time_trials(opts, || {
        x.copy_from_slice(&input);
        block.forward(&mut x, n);
    })?;
    Ok(BenchRow {
        variant: Variant::Full,
        n_frames,
        ms_per_frame: trimmed_mean(&times, opts.trim) / n_frames as f64,
        peak_context_vectors: n,
    })
}

/// Frame-by-frame encode, local write and memory read against fixed-size
/// memories.
pub fn bench_memory(n_frames: usize, tokens: usize, d: usize, opts: &BenchOptions) -> Result<BenchRow> {
    opts.validate()?;
    check_shape(n_frames, tokens, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pipe = MemoryPipeline::new(&mut rng, tokens, d, opts);
    let frames: Vec<Vec<f32>> = (0..n_frames).map(|_| random(&mut rng, tokens * d, 1.0)).collect();
    let local = pipe.local.clone();
    let mut x = vec![0.0; tokens * d];
    let mut peak = 0;
    let times = time_trials(opts, || {
        pipe.local.copy_from_slice(&local);
        for f in &frames {
            x.copy_from_slice(f);
            pipe.frame(&mut x);
            peak = peak.max(pipe.context_vectors());
        }
    })?;
    Ok(BenchRow {
        variant: Variant::Memory,
        n_frames,
        ms_per_frame: trimmed_mean(&times, opts.trim) / n_frames as f64,
        peak_context_vectors: peak,
    })
}

/// Both variants at every length, memory rows first.
pub fn run(frames: &[usize], tokens: usize, d: usize, opts: &BenchOptions) -> Result<BenchResult> {
    let mut rows = Vec::new();
    for &n in frames {
        rows.push(bench_memory(n, tokens, d, opts)?);
    }
    for &n in frames {
        rows.push(bench_full(n, tokens, d, opts)?);
    }
    Ok(BenchResult { rows })
}

/// Least-squares slope of `y` on `x` with its 95% confidence half-width.
pub fn slope_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n < 3 || n != y.len() {
        return Err(Error::Input("slope fit needs at least 3 aligned points".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("slope fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let resid: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let se = (resid / (nf - 2.0) / sxx).sqrt();
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    use statrs::distribution::ContinuousCDF;
    Ok((slope, t.inverse_cdf(0.975) * se))
}

impl BenchResult {
    pub fn row(&self, variant: Variant, n_frames: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.n_frames == n_frames)
    }

    /// `ms_per_frame` at `long` divided by that at `short`.
    pub fn growth_ratio(&self, variant: Variant, short: usize, long: usize) -> Option<f64> {
        Some(self.row(variant, long)?.ms_per_frame / self.row(variant, short)?.ms_per_frame)
    }

    pub fn fit(&self, variant: Variant) -> Result<(f64, f64)> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.n_frames as f64, r.ms_per_frame))
            .unzip();
        slope_fit(&x, &y)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,n_frames,ms_per_frame,peak_context_vectors\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                r.variant.label(),
                r.n_frames,
                r.ms_per_frame,
                r.peak_context_vectors
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::flops;

    fn quick() -> BenchOptions {
        BenchOptions {
            warmup: 1,
            trials: 3,
            ..BenchOptions::default()
        }
    }

    #[test]
    fn attention_macs_scale_quadratically() {
        let (t, d) = (4, 8);
        let macs = |frames: usize| {
            let n = frames * t;
            let x = vec![0.1f32; n * d];
            let mut out = vec![0.0; n * d];
            flops::measure(|| attention_f32(&x, n, &x, &x, n, d, &mut out)).1
        };
        let (a, b) = (macs(15), macs(100));
        assert_eq!(a, 2 * 60 * 60 * 8);
        assert_eq!(b * 225, a * 10_000);
    }

    #[test]
    fn block_counter_matches_analytic_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (300, 16);
        let block = BlockWeights::new(&mut rng, d);
        let mut x = random(&mut rng, n * d, 1.0);
        let (_, macs) = flops::measure(|| block.forward(&mut x, n));
        assert_eq!(macs, block_macs(n, d));
    }

    #[test]
    fn chunked_attention_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (CHUNK + 37, 4);
        let q = random(&mut rng, n * d, 1.0);
        let k = random(&mut rng, n * d, 1.0);
        let v = random(&mut rng, n * d, 1.0);
        let mut out = vec![0.0; n * d];
        attention_f32(&q, n, &k, &v, n, d, &mut out);
        let i = n - 1;
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| f64::from(q[i * d + c] * k[j * d + c])).sum::<f64>() / 2.0)
            .collect();
        let m = s.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for c in 0..d {
            let want: f64 = (0..n).map(|j| (s[j] - m).exp() / z * f64::from(v[j * d + c])).sum();
            assert!((f64::from(out[i * d + c]) - want).abs() < 1e-4);
        }
    }

    #[test]
    fn rows_and_csv() {
        let r = run(&[1, 3], 16, 16, &quick()).unwrap();
        assert_eq!(r.rows.len(), 4);
        let mem: Vec<usize> = r
            .rows
            .iter()
            .filter(|x| x.variant == Variant::Memory)
            .map(|x| x.peak_context_vectors)
            .collect();
        assert_eq!(mem, vec![24 + 32, 24 + 32]);
        assert_eq!(r.row(Variant::Full, 3).unwrap().peak_context_vectors, 48);
        assert!(r.rows.iter().all(|x| x.ms_per_frame > 0.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("variant,n_frames,ms_per_frame,peak_context_vectors\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn too_few_trials_rejected() {
        let o = BenchOptions::with_trials(2);
        assert!(matches!(bench_full(1, 4, 4, &o), Err(Error::Config(_))));
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        let s = [100.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, -50.0];
        assert_eq!(trimmed_mean(&s, 0.2), 4.5);
    }

    #[test]
    fn slope_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (s, ci) = slope_fit(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(ci < 1e-9);
    }
}
