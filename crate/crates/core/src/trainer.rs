//! Training loop, optimizer, checkpoints, inference and mask export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{mirror, standard_vocabulary, VideoSample};
use crate::decoder::{SegmentationResult, AUX_WEIGHT, THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{encode_expression, global_memory_for, video_loss, Locater, LossOptions, Segmenter, VideoRef};
use crate::numerics::{ParamTree, Tensor};

const CHECKPOINT_MAGIC: &str = "LCTR1";
const PAYLOAD_MARK: &str = "payload\n";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Videos per optimizer step.
    pub batch: usize,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub epochs: usize,
    /// Weight of the auxiliary per-module losses.
    pub aux_weight: f64,
    pub seed: u64,
    pub poly_power: f64,
    pub flip_prob: f64,
    /// Frames between cuts of the local-memory gradient path.
    pub truncation: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 1,
            weight_decay: 1e-4,
            epochs: 30,
            aux_weight: AUX_WEIGHT,
            seed: 0,
            poly_power: 0.9,
            flip_prob: 0.5,
            truncation: 4,
            model: ModelConfig::toy(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Every setting as `(key, value)` text, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lambda", self.aux_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("truncation", self.truncation.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("modules", m.modules.to_string()),
            ("patch", m.patch.to_string()),
            ("frame_width", m.frame_width.to_string()),
            ("frame_height", m.frame_height.to_string()),
            ("channels", m.channels.to_string()),
            ("max_words", m.max_words.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("global_ratio", m.global_ratio.to_string()),
            ("local_ratio", m.local_ratio.to_string()),
            ("interval", m.interval.to_string()),
        ]
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda" => self.aux_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "flip_prob" => self.flip_prob = parse(key, value)?,
            "truncation" => self.truncation = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "modules" => m.modules = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "frame_width" => m.frame_width = parse(key, value)?,
            "frame_height" => m.frame_height = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "max_words" => m.max_words = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "global_ratio" => m.global_ratio = parse(key, value)?,
            "local_ratio" => m.local_ratio = parse(key, value)?,
            "interval" => m.interval = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("lr", self.lr > 0.0),
            ("batch", self.batch > 0),
            ("epochs", self.epochs > 0),
            ("truncation", self.truncation > 0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("lambda", self.aux_weight >= 0.0),
            ("poly_power", self.poly_power >= 0.0),
            ("flip_prob", (0.0..=1.0).contains(&self.flip_prob)),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((k, _)) => Err(Error::Config(format!("{k} is out of range"))),
            None => Ok(()),
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }

    /// `lr * (1 - step / total)^poly_power`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.poly_power == 0.0 {
            return self.lr;
        }
        let frac = 1.0 - step as f64 / total.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.poly_power)
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            aux_weight: self.aux_weight,
            truncation: self.truncation,
            interval: self.model.interval,
            detach_mask: true,
        }
    }
}

/// Adam with weight decay applied directly to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Parameters without an entry in `grads` see a zero gradient.
    pub fn step(&mut self, params: &mut ParamTree, grads: &BTreeMap<String, Tensor>, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::Load(format!("optimizer state for {name} has the wrong shape")));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!("gradient for {name} has shape {:?}", g.shape())));
                }
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
                pd[i] -= lr * (update + weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamTree,
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: usize,
    /// Seed and stream of the epoch plan in progress.
    pub rng_state: Vec<u8>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Locater> {
        Locater::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = format!("{CHECKPOINT_MAGIC}\n");
        let _ = writeln!(manifest, "step {}", self.step);
        let _ = writeln!(manifest, "rng {}", hex::encode(&self.rng_state));
        let _ = writeln!(manifest, "adam_t {}", self.optimizer.t);
        for (k, v) in self.config.pairs() {
            let _ = writeln!(manifest, "config {k} {v}");
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (format!("param {k}"), t)).collect();
        tensors.extend(self.optimizer.m.iter().map(|(k, t)| (format!("adam_m {k}"), t)));
        tensors.extend(self.optimizer.v.iter().map(|(k, t)| (format!("adam_v {k}"), t)));
        let mut payload = Vec::new();
        for (name, t) in tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{name} {} {}", dims.join("x"), payload.len());
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        manifest.push_str(PAYLOAD_MARK);
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Load(m.to_string());
        let split = buf
            .windows(PAYLOAD_MARK.len() + 1)
            .position(|w| w[0] == b'\n' && &w[1..] == PAYLOAD_MARK.as_bytes())
            .ok_or_else(|| bad("checkpoint lacks a payload marker"))?;
        let manifest = std::str::from_utf8(&buf[..split]).map_err(|_| bad("manifest is not text"))?;
        let payload = &buf[split + 1 + PAYLOAD_MARK.len()..];
        let mut lines = manifest.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing LCTR1 header"));
        }
        let mut config = TrainConfig::default();
        let mut step = None;
        let mut rng_state = None;
        let mut optimizer = Adam::default();
        let mut params = ParamTree::new();
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["step", v] => step = Some(v.parse().map_err(|_| bad("bad step"))?),
                ["rng", v] => rng_state = Some(hex::decode(v).map_err(|_| bad("bad rng state"))?),
                ["adam_t", v] => optimizer.t = v.parse().map_err(|_| bad("bad optimizer step"))?,
                ["config", k, v] => config.set(k, v).map_err(|e| Error::Load(e.to_string()))?,
                [kind @ ("param" | "adam_m" | "adam_v"), name, dims, offset] => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad tensor shape"))?;
                    let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
                    let n: usize = shape.iter().product();
                    let bytes = payload
                        .get(offset..offset + 4 * n)
                        .ok_or_else(|| bad("payload too short"))?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                        .collect();
                    let t = Tensor::new(shape, data)?;
                    match *kind {
                        "param" => params.insert(*name, t)?,
                        "adam_m" => {
                            optimizer.m.insert(name.to_string(), t);
                        }
                        _ => {
                            optimizer.v.insert(name.to_string(), t);
                        }
                    }
                }
                _ => return Err(Error::Load(format!("bad manifest line {line:?}"))),
            }
        }
        let ckpt = Self {
            params,
            config,
            step: step.ok_or_else(|| bad("manifest lacks step"))?,
            rng_state: rng_state.ok_or_else(|| bad("manifest lacks rng state"))?,
            optimizer,
        };
        // reject parameter sets that do not fit the recorded config
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Mirror left-right, swapping the direction words.
pub fn flip_augment(sample: &VideoSample) -> Result<VideoSample> {
    mirror(sample, &standard_vocabulary())
}

/// Progress of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch: Vec<usize>,
}

/// Order and flip decisions for one epoch, reproducible from the seed.
fn epoch_plan(seed: u64, epoch: usize, samples: usize, flip_prob: f64) -> (Vec<usize>, Vec<bool>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut state = rng.get_seed().to_vec();
    state.extend_from_slice(&(epoch as u64).to_le_bytes());
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    let flips = (0..samples).map(|_| rng.random_bool(flip_prob)).collect();
    (order, flips, state)
}

fn check_corpus(cfg: &ModelConfig, corpus: &[VideoSample]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        let (h, w, c) = s.dims();
        if (h, w, c) != (cfg.frame_height, cfg.frame_width, cfg.channels) {
            return Err(Error::Config(format!(
                "sample {i} is {w}x{h}x{c}, model expects {}x{}x{}",
                cfg.frame_width, cfg.frame_height, cfg.channels
            )));
        }
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, corpus: &[VideoSample]) -> Result<Checkpoint> {
    train_with(cfg, corpus, None, |_| {})
}

/// Runs (or resumes) training, reporting every step to `on_step`.
pub fn train_with(
    cfg: &TrainConfig,
    corpus: &[VideoSample],
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_corpus(&cfg.model, corpus)?;
    let (mut params, mut optimizer, start) = match resume {
        Some(c) => {
            if c.config.model != cfg.model {
                return Err(Error::Load("checkpoint was trained with a different model config".into()));
            }
            Locater::from_params(cfg.model.clone(), c.params.clone())?;
            (c.params, c.optimizer, c.step)
        }
        None => (Locater::new(cfg.model.clone(), cfg.seed)?.params, Adam::default(), 0),
    };
    let per_epoch = cfg.steps_per_epoch(corpus.len());
    let total = cfg.total_steps(corpus.len());
    let opts = cfg.loss_options();
    let mut rng_state = Vec::new();
    let mut plan: Option<(usize, Vec<usize>, Vec<bool>)> = None;
    for step in start..total {
        let epoch = step / per_epoch;
        if plan.as_ref().is_none_or(|p| p.0 != epoch) {
            let (order, flips, state) = epoch_plan(cfg.seed, epoch, corpus.len(), cfg.flip_prob);
            rng_state = state;
            plan = Some((epoch, order, flips));
        }
        let (_, order, flips) = plan.as_ref().expect("plan");
        let slot = step % per_epoch;
        let lo = slot * cfg.batch;
        let hi = (lo + cfg.batch).min(corpus.len());
        let batch: Vec<usize> = order[lo..hi].to_vec();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (&i, &flip) in batch.iter().zip(&flips[lo..hi]) {
            let flipped;
            let sample = if flip {
                flipped = flip_augment(&corpus[i])?;
                &flipped
            } else {
                &corpus[i]
            };
            let video = VideoRef {
                frames: &sample.frames,
                masks: &sample.masks,
                expression: &sample.expression,
            };
            let (l, g) = video_loss(&params, &cfg.model, &video, &opts)?;
            if !l.is_finite() {
                log::error!(
                    "non-finite loss at step {step}: batch {batch:?}, sample {i}, expression {:?}, flipped {flip}",
                    sample.roles.text()
                );
                return Err(Error::Numeric(format!("loss is {l} at step {step} in batch {batch:?}")));
            }
            loss += scale * l;
            for (k, t) in g {
                match grads.get_mut(&k) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += scale * b),
                    None => {
                        grads.insert(k, t.scale(scale));
                    }
                }
            }
        }
        let lr = cfg.lr_at(step, total);
        optimizer.step(&mut params, &grads, lr, cfg.weight_decay)?;
        log::info!("step {step} epoch {epoch} loss {loss:.6} lr {lr:.3e}");
        on_step(&StepLog {
            step,
            epoch,
            loss,
            lr,
            batch,
        });
    }
    // the checkpoint holds exactly what the file format can represent
    params.quantize_f32();
    for t in optimizer.m.values_mut().chain(optimizer.v.values_mut()) {
        t.quantize_f32();
    }
    Ok(Checkpoint {
        params,
        config: cfg.clone(),
        step: total.max(start),
        rng_state,
        optimizer,
    })
}

/// Segments every frame with a global memory built once up front and a
/// local memory updated from each prediction.
pub fn infer(video: &VideoSample, checkpoint: &Checkpoint) -> Result<Vec<SegmentationResult>> {
    infer_with(video, &checkpoint.model()?, checkpoint.config.model.interval, THRESHOLD)
}

pub fn infer_with(video: &VideoSample, model: &Locater, interval: usize, threshold: f64) -> Result<Vec<SegmentationResult>> {
    check_corpus(&model.config, std::slice::from_ref(video))?;
    let text = encode_expression(model, &video.expression)?;
    let global = global_memory_for(model, &video.frames, &text, interval)?;
    let mut seg = Segmenter::new(model, text, global)?.with_threshold(threshold);
    video.frames.iter().map(|f| seg.step(f)).collect()
}

pub fn mask_file_name(t: usize) -> String {
    format!("frame_{t:05}.pbm")
}

pub fn prob_file_name(t: usize) -> String {
    format!("frame_{t:05}.pgm")
}

/// Binary PBM (P4) of a row-major mask.
pub fn encode_pbm(mask: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(Error::Dimension(format!("mask of {} pixels is not {width}x{height}", mask.len())));
    }
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    for row in mask.chunks(width) {
        for chunk in row.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |b, (i, &on)| b | (u8::from(on) << (7 - i)));
            out.push(byte);
        }
    }
    Ok(out)
}

fn header_fields(buf: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut fields = Vec::new();
    let mut at = 2;
    while fields.len() < count {
        while at < buf.len() && buf[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < buf.len() && buf[at].is_ascii_digit() {
            at += 1;
        }
        let text = std::str::from_utf8(&buf[start..at]).unwrap_or_default();
        fields.push(text.parse().map_err(|_| Error::Format("bad image header".into()))?);
    }
    // one whitespace byte ends the header
    Ok((fields, at + 1))
}

/// Returns `(mask, width, height)`.
pub fn decode_pbm(buf: &[u8]) -> Result<(Vec<bool>, usize, usize)> {
    if !buf.starts_with(b"P4") {
        return Err(Error::Format("not a binary PBM".into()));
    }
    let (f, at) = header_fields(buf, 2)?;
    let (w, h) = (f[0], f[1]);
    let stride = w.div_ceil(8);
    let data = buf
        .get(at..at + stride * h)
        .ok_or_else(|| Error::Format("truncated PBM".into()))?;
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            mask.push(data[y * stride + x / 8] >> (7 - x % 8) & 1 == 1);
        }
    }
    Ok((mask, w, h))
}

/// 8-bit PGM (P5) of an `[H, W]` probability map.
pub fn encode_pgm(probs: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = (probs.rows(), probs.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(probs.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Writes `frame_NNNNN.pbm` masks and `frame_NNNNN.pgm` probabilities.
pub fn save_predictions(dir: &Path, results: &[SegmentationResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, r) in results.iter().enumerate() {
        let (h, w) = (r.pixel_probs.rows(), r.pixel_probs.cols());
        fs::write(dir.join(mask_file_name(t)), encode_pbm(&r.binary, w, h)?)?;
        fs::write(dir.join(prob_file_name(t)), encode_pgm(&r.pixel_probs)?)?;
    }
    Ok(())
}

/// Reads `frame_NNNNN.pbm` files in frame order.
pub fn load_predictions(dir: &Path) -> Result<Vec<Vec<bool>>> {
    let mut masks = Vec::new();
    loop {
        let path = dir.join(mask_file_name(masks.len()));
        if !path.exists() {
            break;
        }
        masks.push(decode_pbm(&fs::read(&path)?)?.0);
    }
    if masks.is_empty() {
        return Err(Error::Input(format!("{} holds no frame_00000.pbm", dir.display())));
    }
    Ok(masks)
}
