//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line on
//! stderr; the tests share a lock so timings are not disturbed by training
//! running on another thread.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use locater::bench::{self, BenchOptions, Variant};
use locater::corpus::{
    concat_spatial, concat_temporal, contrast_sample, generate, SceneConfig, SceneKind, VideoSample,
};
use locater::decoder::{decode_mask, query_embed, QueryVector, Upsampler};
use locater::encoders::TextEmbedding;
use locater::eval::evaluate;
use locater::memory::{
    global_write, local_write, read, GlobalMemory, Gate, LocalMemory,
};
use locater::model::{encode_expression, global_memory_for, video_loss, LossOptions, VideoRef};
use locater::numerics::{grad_check_with, GradCheckOptions, Graph};
use locater::trainer::{infer_with, train_with, TrainConfig};
use locater::{Locater, ModelConfig, ParamTree, Segmenter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stderr so the line shows without `--nocapture`.
fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} [{verdict}] {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

fn mean_iou(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> f64 {
    evaluate(preds, gts).unwrap().mean_iou
}

/// Per-frame mean IoU of a model over a set of videos.
fn model_miou(model: &Locater, videos: &[VideoSample], interval: usize) -> f64 {
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for v in videos {
        for (r, m) in infer_with(v, model, interval, 0.5).unwrap().into_iter().zip(&v.masks) {
            p.push(r.binary);
            g.push(m.clone());
        }
    }
    mean_iou(&p, &g)
}

#[test]
fn c1_efficiency_separation() {
    let _g = serial();
    let start = Instant::now();
    let opts = BenchOptions {
        warmup: 1,
        trials: 3,
        ..BenchOptions::default()
    };
    let result = bench::run(&[15, 30, 50, 80, 100], 256, 128, &opts).unwrap();
    let mem = result.growth_ratio(Variant::Memory, 15, 100).unwrap();
    let full = result.growth_ratio(Variant::Full, 15, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = mem <= 1.5 && full >= 3.0 && secs < 300.0;
    report(
        1,
        "efficiency separation (D=128, 256 tokens)",
        pass,
        &format!("memory ratio {mem:.3} (<= 1.5), full ratio {full:.3} (>= 3.0), {secs:.0} s"),
    );
    assert!(pass);
}

#[test]
fn c2_constant_memory() {
    let _g = serial();
    let cfg = ModelConfig::toy();
    let model = Locater::new(cfg.clone(), 11).unwrap();
    let expected = cfg.global_cells() + cfg.local_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut peaks = Vec::new();
    for n in [5usize, 50, 500] {
        let frames: Vec<Tensor> = (0..n)
            .map(|_| Tensor::randn(&[cfg.frame_height, cfg.frame_width, cfg.channels], 0.5, &mut rng))
            .collect();
        let text = encode_expression(&model, &[2, 3, 4]).unwrap();
        let global = global_memory_for(&model, &frames, &text, cfg.interval).unwrap();
        let mut seg = Segmenter::new(&model, text, global).unwrap();
        let mut peak = seg.context_vectors();
        for f in &frames {
            seg.step(f).unwrap();
            peak = peak.max(seg.context_vectors());
        }
        peaks.push((n, peak));
    }
    let pass = peaks.iter().all(|&(_, p)| p == expected);
    report(
        2,
        "constant memory",
        pass,
        &format!("peak context vectors {peaks:?}, N_g + N_l = {expected}"),
    );
    assert!(pass);
}

#[test]
fn c3_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        frame_width: 32,
        frame_height: 32,
        max_words: 5,
        vocab_size: 12,
        ..ModelConfig::toy()
    };
    assert_eq!(cfg.patches(), 16);
    let model = Locater::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let frames: Vec<Tensor> = (0..2)
        .map(|_| Tensor::randn(&[32, 32, 3], 0.5, &mut rng))
        .collect();
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|_| (0..32 * 32).map(|_| rng.random::<bool>()).collect())
        .collect();
    let expr = [3, 7, 4];
    // every path differentiated, so the finite differences see the same function
    let opts = LossOptions {
        interval: 1,
        detach_mask: false,
        ..LossOptions::for_config(&cfg)
    };
    let video = VideoRef {
        frames: &frames,
        masks: &masks,
        expression: &expr,
    };
    let loss = |p: &ParamTree| video_loss(p, &cfg, &video, &opts);
    let check = GradCheckOptions {
        per_tensor: 4,
        seed: 23,
    };
    let r = grad_check_with(loss, &model.params, 1e-5, &check).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.max_rel_error < 1e-4 && secs < 60.0;
    report(
        3,
        "gradient correctness",
        pass,
        &format!(
            "max relative error {:.2e} over {} entries (worst {}[{}]), {secs:.1} s",
            r.max_rel_error, r.checked, r.worst_param, r.worst_index
        ),
    );
    assert!(pass);
}

/// Falls scenes: before the event the two look-alike objects differ only in
/// what happens later, so the referent is identifiable from memory alone.
fn falls_scene() -> SceneConfig {
    SceneConfig {
        kind: SceneKind::Falls,
        min_objects: 2,
        max_objects: 3,
        min_radius: 7.0,
        max_radius: 10.0,
        ..SceneConfig::default()
    }
}

const ABLATION_TRAIN: usize = 48;
const ABLATION_TEST: usize = 200;
const ABLATION_EPOCHS: usize = 40;

fn ablation_config(memory: bool) -> TrainConfig {
    let cfg = TrainConfig {
        epochs: ABLATION_EPOCHS,
        seed: 31,
        ..TrainConfig::default()
    };
    if memory {
        cfg
    } else {
        TrainConfig {
            model: cfg.model.without_memory(),
            ..cfg
        }
    }
}

struct Trained {
    model: Locater,
    test: Vec<VideoSample>,
    elapsed: Duration,
}

/// The full model trained on falls scenes, shared by criteria 4 and 9.
fn full_falls_model() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let scene = falls_scene();
        let train = generate(ABLATION_TRAIN, &scene, 100).unwrap();
        let test = generate(ABLATION_TEST, &scene, 200).unwrap();
        let ckpt = train_with(&ablation_config(true), &train, None, |_| {}).unwrap();
        Trained {
            model: ckpt.model().unwrap(),
            test,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn c4_memory_ablation() {
    let _g = serial();
    let full = full_falls_model();
    let start = Instant::now();
    let train = generate(ABLATION_TRAIN, &falls_scene(), 100).unwrap();
    let ckpt = train_with(&ablation_config(false), &train, None, |_| {}).unwrap();
    let bare = ckpt.model().unwrap();
    let with_memory = model_miou(&full.model, &full.test, 10);
    let without = model_miou(&bare, &full.test, 10);
    let secs = (full.elapsed + start.elapsed()).as_secs_f64();
    let gap = with_memory - without;
    let pass = gap >= 0.05 && secs < 1800.0;
    report(
        4,
        "memory ablation",
        pass,
        &format!("mIoU with memory {with_memory:.4}, without {without:.4}, gap {gap:.4} (>= 0.05), {secs:.0} s"),
    );
    assert!(pass);
}

/// Best mean IoU reachable by any per-patch probability grid fitted to the
/// pixel BCE and upsampled like the model output.
fn upsampling_ceiling(videos: &[VideoSample], cfg: &ModelConfig) -> f64 {
    let up = Upsampler::for_config(cfg).unwrap();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for v in videos {
        for m in &v.masks {
            let target: Vec<f64> = m.iter().map(|&b| f64::from(u8::from(b))).collect();
            let mut z = vec![0.0; cfg.patches()];
            let (mut mo, mut ve) = (vec![0.0; z.len()], vec![0.0; z.len()]);
            for t in 1..=300 {
                let mut g = Graph::new();
                let zv = g.variable(Tensor::matrix(z.len(), 1, z.clone())).unwrap();
                let p = g.sigmoid(zv).unwrap();
                let px = up.node(&mut g, p).unwrap();
                let l = g.bce_mean(px, &target).unwrap();
                let grad = g.backward(l).unwrap().of(zv);
                for (i, gi) in grad.data().iter().enumerate() {
                    mo[i] = 0.9 * mo[i] + 0.1 * gi;
                    ve[i] = 0.999 * ve[i] + 0.001 * gi * gi;
                    let mh = mo[i] / (1.0 - 0.9f64.powi(t));
                    let vh = ve[i] / (1.0 - 0.999f64.powi(t));
                    z[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
                }
            }
            let probs: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let px = up.apply(&probs).unwrap();
            preds.push(px.data().iter().map(|&v| v > 0.5).collect());
            gts.push(m.clone());
        }
    }
    mean_iou(&preds, &gts)
}

#[test]
fn c5_overfit_sanity() {
    let _g = serial();
    let start = Instant::now();
    let videos = generate(8, &SceneConfig::default(), 41).unwrap();
    let cfg = TrainConfig {
        epochs: 250,
        flip_prob: 0.0,
        seed: 42,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.total_steps(videos.len()), 2000);
    let ckpt = train_with(&cfg, &videos, None, |_| {}).unwrap();
    let model = ckpt.model().unwrap();
    let miou = model_miou(&model, &videos, cfg.model.interval);
    let secs = start.elapsed().as_secs_f64();
    let ceiling = upsampling_ceiling(&videos, &cfg.model);
    let pass = miou >= 0.90 && secs < 900.0;
    report(
        5,
        "overfit sanity",
        pass,
        &format!(
            "train mIoU {miou:.4} (>= 0.90) after 2000 steps, {secs:.0} s; \
             best mIoU any {}-pixel patch grid can reach here: {ceiling:.4}",
            cfg.model.patch
        ),
    );
    assert!(pass);
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

/// Gated write over explicit loops; `wc` is `[in + D, D]` and `x` already
/// holds the controller input rows.
fn scalar_write(x: &[Vec<f64>], m: &[Vec<f64>], wc: &Tensor, wo: &Tensor) -> Vec<Vec<f64>> {
    let d = m[0].len();
    let mut ap = vec![0.0; d];
    for row in m {
        for j in 0..d {
            ap[j] += row[j] / m.len() as f64;
        }
    }
    let mut cand = Vec::new();
    for xp in x {
        let z: Vec<f64> = xp.iter().chain(&ap).copied().collect();
        let mut c = vec![0.0; d];
        for (j, cj) in c.iter_mut().enumerate() {
            for (k, zk) in z.iter().enumerate() {
                *cj += zk * wc.at(k, j);
            }
        }
        cand.push(c);
    }
    let mut out = Vec::new();
    for mn in m {
        let mut acc = vec![0.0; d];
        for cp in &cand {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += cp[i] * wo.at(i, j) * mn[j];
                }
            }
            let o = sigmoid(s);
            for j in 0..d {
                acc[j] += (o * cp[j] + (1.0 - o) * mn[j]) / x.len() as f64;
            }
        }
        out.push(acc);
    }
    out
}

/// 3×3 zero-padded convolution over a row-major grid, weights laid out as
/// `[(ky * 3 + kx) * cin + ch, cout]`.
fn scalar_conv(input: &[Vec<f64>], gh: usize, gw: usize, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let cin = input[0].len();
    let cout = w.cols();
    let mut out = vec![vec![0.0; cout]; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            for (o, acc) in out[y * gw + x].iter_mut().enumerate() {
                *acc = b.at(0, o);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                            continue;
                        }
                        let src = &input[sy as usize * gw + sx as usize];
                        for (ch, v) in src.iter().enumerate() {
                            *acc += v * w.at((ky * 3 + kx) * cin + ch, o);
                        }
                    }
                }
            }
        }
    }
    out
}

fn scalar_attend(q: &[Vec<f64>], m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len();
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = m
                .iter()
                .map(|mr| qr.iter().zip(mr).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..d)
                .map(|j| m.iter().zip(&e).map(|(mr, w)| w / z * mr[j]).sum())
                .collect()
        })
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.at(r, c)).abs());
        }
    }
    worst
}

fn write_params(rng: &mut ChaCha8Rng, d: usize) -> ParamTree {
    let mut p = ParamTree::new();
    let h = d / 2;
    let mut put = |name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
        p.insert(name, Tensor::randn(&[r, c], 0.5, rng)).unwrap();
    };
    put("memory.global.wc", 2 * d, d, rng);
    put("memory.global.wo", d, d, rng);
    put("memory.local.wc", 3 * d, d, rng);
    put("memory.local.wo", d, d, rng);
    put("memory.mask.conv1.w", 9, h, rng);
    put("memory.mask.conv1.b", 1, h, rng);
    put("memory.mask.conv2.w", 9 * h, d, rng);
    put("memory.mask.conv2.b", 1, d, rng);
    put("decoder.w1", 3 * d, d, rng);
    put("decoder.w2", d, d, rng);
    p
}

#[test]
fn c6_write_controller_identities() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let d = 4;
    let grid = (2usize, 2usize);
    let nv = grid.0 * grid.1;
    let p = write_params(&mut rng, d);
    let v = randm(&mut rng, nv, d);
    let gm = GlobalMemory { cells: randm(&mut rng, 6, d) };
    let lm = LocalMemory { cells: randm(&mut rng, 8, d), frame_index: 3 };
    let mask: Vec<f64> = (0..nv).map(|_| rng.random::<f64>()).collect();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    // gate closed: fixed point of both controllers
    let closed = global_write(&v, &gm, &p, Gate::Closed).unwrap();
    checks.push(("global gate-closed", closed.cells.max_abs_diff(&gm.cells), 1e-12));
    let closed = local_write(&v, &mask, 3, &lm, grid, &p, Gate::Closed).unwrap();
    checks.push(("local gate-closed", closed.cells.max_abs_diff(&lm.cells), 1e-12));

    // gate open: every cell becomes the mean candidate
    let open = global_write(&v, &gm, &p, Gate::Open).unwrap();
    let wc = p.get("memory.global.wc").unwrap();
    let ap = gm.cells.mean_rows();
    let mut mean_c = vec![0.0; d];
    for r in 0..nv {
        let z: Vec<f64> = v.row(r).iter().chain(ap.row(0)).copied().collect();
        for (j, mc) in mean_c.iter_mut().enumerate() {
            *mc += (0..2 * d).map(|k| z[k] * wc.at(k, j)).sum::<f64>() / nv as f64;
        }
    }
    let collapse = vec![mean_c; gm.len()];
    checks.push(("global gate-open", max_diff(&collapse, &open.cells), 1e-12));

    // global write
    let got = global_write(&v, &gm, &p, Gate::Learned).unwrap();
    let want = scalar_write(&rows(&v), &rows(&gm.cells), wc, p.get("memory.global.wo").unwrap());
    checks.push(("global write transcription", max_diff(&want, &got.cells), 1e-10));

    // local write, including the mask embedding
    let got = local_write(&v, &mask, 3, &lm, grid, &p, Gate::Learned).unwrap();
    let probs: Vec<Vec<f64>> = mask.iter().map(|&m| vec![m]).collect();
    let h = scalar_conv(&probs, grid.1, grid.0, p.get("memory.mask.conv1.w").unwrap(), p.get("memory.mask.conv1.b").unwrap());
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
    let s = scalar_conv(&h, grid.1, grid.0, p.get("memory.mask.conv2.w").unwrap(), p.get("memory.mask.conv2.b").unwrap());
    let x: Vec<Vec<f64>> = (0..nv).map(|r| v.row(r).iter().chain(&s[r]).copied().collect()).collect();
    let want = scalar_write(&x, &rows(&lm.cells), p.get("memory.local.wc").unwrap(), p.get("memory.local.wo").unwrap());
    checks.push(("local write transcription", max_diff(&want, &got.cells), 1e-10));
    checks.push(("local frame index", (got.frame_index as f64 - 4.0).abs(), 0.0));

    // read
    let got = read(&v, &gm, &lm).unwrap();
    let cg = scalar_attend(&rows(&v), &rows(&gm.cells));
    let cl = scalar_attend(&rows(&v), &rows(&lm.cells));
    let want: Vec<Vec<f64>> = (0..nv)
        .map(|r| (0..d).map(|j| v.at(r, j) + cg[r][j] + cl[r][j]).collect())
        .collect();
    checks.push(("read transcription", max_diff(&want, &got), 1e-10));

    // query embedding over three real words and two pads
    let words = randm(&mut rng, 5, d);
    let text = TextEmbedding {
        tokens: words.clone(),
        pad_mask: vec![true, true, true, false, false],
    };
    let summaries = [randm(&mut rng, 1, d), randm(&mut rng, 1, d), randm(&mut rng, 1, d)];
    let q = query_embed(&text, &summaries, &p).unwrap();
    let ctx: Vec<f64> = summaries.iter().flat_map(|s| s.row(0).to_vec()).collect();
    let (w1, w2) = (p.get("decoder.w1").unwrap(), p.get("decoder.w2").unwrap());
    let sv: Vec<f64> = (0..d).map(|j| (0..3 * d).map(|k| ctx[k] * w1.at(k, j)).sum()).collect();
    let scores: Vec<f64> = (0..3)
        .map(|w| {
            let kw: Vec<f64> = (0..d).map(|j| (0..d).map(|k| words.at(w, k) * w2.at(k, j)).sum()).collect();
            sv.iter().zip(&kw).map(|(a, b)| a * b).sum()
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let a: Vec<f64> = e.iter().map(|x| x / z).chain([0.0, 0.0]).collect();
    let qv: Vec<f64> = (0..d).map(|j| (0..3).map(|w| a[w] * words.at(w, j)).sum()).collect();
    let attn_err = a.iter().zip(&q.word_attn).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    checks.push(("query attention transcription", attn_err, 1e-10));
    checks.push(("query vector transcription", max_diff(&[qv.clone()], &q.q), 1e-10));

    // decoding
    let g = randm(&mut rng, nv, d);
    let qvec = QueryVector { q: Tensor::matrix(1, d, qv.clone()), word_attn: a };
    let got = decode_mask(&g, &qvec).unwrap();
    let want: Vec<f64> = (0..nv)
        .map(|r| sigmoid((0..d).map(|j| g.at(r, j) * qv[j]).sum::<f64>() / (d as f64).sqrt()))
        .collect();
    let dec_err = want.iter().zip(&got).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    checks.push(("decode transcription", dec_err, 1e-10));

    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, err, tol)| !(err <= tol))
        .map(|(name, err, tol)| format!("{name} {err:.2e} > {tol:.0e}"))
        .collect();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let pass = failed.is_empty();
    let detail = if pass {
        format!("{} checks, largest deviation {worst:.2e}", checks.len())
    } else {
        failed.join("; ")
    };
    report(6, "write-controller identities and transcriptions", pass, &detail);
    assert!(pass);
}

struct OracleReport {
    overall: f64,
    mean: f64,
    precision: Vec<f64>,
    map: f64,
}

fn oracle(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> OracleReport {
    let (mut ti, mut tu) = (0u64, 0u64);
    let mut ious = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let (mut i, mut u) = (0u64, 0u64);
        for k in 0..p.len() {
            if p[k] && g[k] {
                i += 1;
            }
            if p[k] || g[k] {
                u += 1;
            }
        }
        ti += i;
        tu += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let frac = |k: f64| ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64;
    let precision = [0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|&k| frac(k)).collect();
    let map = (0..10).map(|i| frac(0.5 + 0.05 * i as f64)).sum::<f64>() / 10.0;
    OracleReport {
        overall: if tu == 0 { 1.0 } else { ti as f64 / tu as f64 },
        mean: ious.iter().sum::<f64>() / ious.len() as f64,
        precision,
        map,
    }
}

#[test]
fn c7_metric_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let px = 24 * 24;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..100 {
        let density = rng.random_range(0.0..0.6);
        let g: Vec<bool> = (0..px).map(|_| rng.random::<f64>() < density).collect();
        let flip = rng.random_range(0.0..0.5);
        let p: Vec<bool> = g.iter().map(|&b| if rng.random::<f64>() < flip { !b } else { b }).collect();
        preds.push(p);
        gts.push(g);
    }
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut reports = 0;
    let mut subsets: Vec<(usize, usize)> = vec![(0, 100)];
    for _ in 0..20 {
        let a = rng.random_range(0..99);
        subsets.push((a, rng.random_range(a + 1..=100)));
    }
    for (a, b) in subsets {
        let r = evaluate(&preds[a..b], &gts[a..b]).unwrap();
        let o = oracle(&preds[a..b], &gts[a..b]);
        worst = worst
            .max((r.overall_iou - o.overall).abs())
            .max((r.mean_iou - o.mean).abs())
            .max((r.map - o.map).abs());
        for ((_, v), w) in r.precision_at.iter().zip(&o.precision) {
            worst = worst.max((v - w).abs());
        }
        monotone &= r.precision_at.windows(2).all(|w| w[0].1 >= w[1].1);
        reports += 1;
    }
    let pass = worst <= 1e-12 && monotone;
    report(
        7,
        "metric oracle",
        pass,
        &format!("{reports} reports over 100 mask pairs, largest deviation {worst:.2e}, P@K monotone: {monotone}"),
    );
    assert!(pass);
}

#[test]
fn c8_corpus_contracts() {
    let _g = serial();
    let singles = generate(60, &SceneConfig::default(), 81).unwrap();
    let pairs: Vec<(usize, usize)> = contrast_sample(&singles).unwrap().into_iter().take(50).collect();
    let mut problems = Vec::new();
    for &(qi, pi) in &pairs {
        let (q, p) = (&singles[qi], &singles[pi]);
        let shared = q.roles.pairs.iter().filter(|x| p.roles.pairs.contains(x)).count();
        let identical = shared == q.roles.pairs.len() && q.roles.pairs.len() == p.roles.pairs.len();
        if shared == 0 || identical {
            problems.push(format!("pair ({qi}, {pi}) shares {shared} role realizations"));
        }
        let s = concat_spatial(q, p).unwrap();
        let (h, w, _) = s.dims();
        if h != q.dims().0 || w != q.dims().1 + p.dims().1 || s.len() != q.len() {
            problems.push(format!("pair ({qi}, {pi}) spatial dims {:?}", s.dims()));
        }
        let t = concat_temporal(q, p).unwrap();
        let n = q.len();
        if t.len() != 2 * n || t.masks[n..].iter().any(|m| m.iter().any(|&b| b)) || t.masks[..n] != q.masks[..] {
            problems.push(format!("pair ({qi}, {pi}) temporal concat"));
        }
    }
    let pass = pairs.len() == 50 && problems.is_empty();
    let detail = if pass {
        "50 pairs: role rule, width additivity and temporal layout hold".to_string()
    } else {
        format!("{} pairs; {}", pairs.len(), problems.join("; "))
    };
    report(8, "corpus contracts", pass, &detail);
    assert!(pass);
}

#[test]
fn c9_sampling_interval_robustness() {
    let _g = serial();
    let full = full_falls_model();
    let at5 = model_miou(&full.model, &full.test, 5);
    let at10 = model_miou(&full.model, &full.test, 10);
    let diff = (at5 - at10).abs();
    let pass = diff < 0.02;
    report(
        9,
        "sampling-interval robustness",
        pass,
        &format!("mIoU interval 5 {at5:.4}, interval 10 {at10:.4}, difference {diff:.4} (< 0.02)"),
    );
    assert!(pass);
}
