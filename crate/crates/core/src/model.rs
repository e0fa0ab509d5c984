//! The assembled segmentation model: parameter construction, the
//! whole-video training loss, and streaming inference.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{
    self, aux_node, binarize, decode_node, loss_node, query_node, summarize_node,
    SegmentationResult, Upsampler, THRESHOLD,
};
use crate::encoders::{self, encode_text_node, fuse_node, patchify_node, TextEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::memory::{
    self, local_write, mask_embed_node, read_node, sampled_frames, write_node, Gate,
    GlobalMemory, LocalMemory, GLOBAL, LOCAL,
};
use crate::numerics::{Graph, Init, ParamTree, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Locater {
    pub config: ModelConfig,
    pub params: ParamTree,
}

impl Locater {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            tree: &mut params,
            rng: &mut rng,
        };
        encoders::init(&config, &mut init)?;
        memory::init(&config, &mut init)?;
        decoder::init(&config, &mut init)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against a
    /// fresh model of the same configuration.
    pub fn from_params(config: ModelConfig, params: ParamTree) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (k, t) in reference.params.iter() {
            let got = params
                .get(k)
                .ok_or_else(|| Error::Load(format!("checkpoint lacks parameter {k}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "parameter {k} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains(k)) {
            return Err(Error::Load(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params })
    }

    pub fn segment(&self, frames: &[Tensor], expression: &[usize]) -> Result<Vec<SegmentationResult>> {
        segment_video(self, frames, expression, self.config.interval)
    }
}

/// A training example seen by the loss: frames `[H, W, C]`, row-major
/// boolean masks, and token ids.
#[derive(Clone, Copy, Debug)]
pub struct VideoRef<'a> {
    pub frames: &'a [Tensor],
    pub masks: &'a [Vec<bool>],
    pub expression: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub aux_weight: f64,
    /// Local-memory recurrence is cut every this many frames.
    pub truncation: usize,
    pub interval: usize,
    /// Stop gradients through the predicted mask fed to the local write.
    pub detach_mask: bool,
}

impl LossOptions {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            aux_weight: decoder::AUX_WEIGHT,
            truncation: 4,
            interval: cfg.interval,
            detach_mask: true,
        }
    }
}

struct FrameNodes {
    v: Var,
    taps: Vec<Var>,
}

fn encode_frame(g: &mut Graph, frame: &Tensor, words: Var, mask: &[bool], cfg: &ModelConfig) -> Result<FrameNodes> {
    let p = patchify_node(g, frame, cfg)?;
    let taps = fuse_node(g, p, words, mask, cfg)?;
    Ok(FrameNodes {
        v: *taps.last().expect("K >= 1"),
        taps,
    })
}

fn check_video(cfg: &ModelConfig, video: &VideoRef<'_>) -> Result<()> {
    if video.frames.is_empty() {
        return Err(Error::Input("video has no frames".into()));
    }
    if video.frames.len() != video.masks.len() {
        return Err(dim_err!(
            "{} frames but {} masks",
            video.frames.len(),
            video.masks.len()
        ));
    }
    let pixels = cfg.frame_width * cfg.frame_height;
    if let Some(m) = video.masks.iter().find(|m| m.len() != pixels) {
        return Err(dim_err!("mask of {} pixels, frame has {pixels}", m.len()));
    }
    Ok(())
}

/// Mean over frames of the per-frame segmentation loss, with gradients for
/// every parameter.
pub fn video_loss(
    params: &ParamTree,
    cfg: &ModelConfig,
    video: &VideoRef<'_>,
    opts: &LossOptions,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    check_video(cfg, video)?;
    if opts.truncation == 0 {
        return Err(Error::Config("truncation window must be >= 1".into()));
    }
    let mut g = Graph::with_params(params);
    let up = Upsampler::for_config(cfg)?;
    let (words, pad) = encode_text_node(&mut g, video.expression, cfg)?;
    let frames = video
        .frames
        .iter()
        .map(|f| encode_frame(&mut g, f, words, &pad, cfg))
        .collect::<Result<Vec<_>>>()?;

    let global = if cfg.global_cells() > 0 {
        let mut cells = g.param(&format!("{GLOBAL}.init"))?;
        for t in sampled_frames(frames.len(), opts.interval)? {
            cells = write_node(&mut g, GLOBAL, frames[t].v, cells, Gate::Learned)?;
        }
        Some(cells)
    } else {
        None
    };
    let mut local = if cfg.local_cells() > 0 {
        Some(g.param(&format!("{LOCAL}.init"))?)
    } else {
        None
    };

    let n = frames.len() as f64;
    let mut terms = Vec::with_capacity(frames.len());
    let mut prev_probs: Option<Var> = None;
    for (t, fr) in frames.iter().enumerate() {
        if let (Some(cells), Some(probs)) = (local, prev_probs) {
            let cells = if t % opts.truncation == 0 {
                g.detach(cells)?
            } else {
                cells
            };
            let probs = if opts.detach_mask { g.detach(probs)? } else { probs };
            let s = mask_embed_node(&mut g, probs, cfg.grid())?;
            let x = g.concat_cols(&[frames[t - 1].v, s])?;
            local = Some(write_node(&mut g, LOCAL, x, cells, Gate::Learned)?);
        }
        let ctx = read_node(&mut g, fr.v, global, local)?;
        let s = summarize_node(&mut g, fr.v, global, local)?;
        let (q, _) = query_node(&mut g, words, &pad, s)?;
        let probs = decode_node(&mut g, ctx, q)?;
        prev_probs = Some(probs);
        let main = up.node(&mut g, probs)?;
        let aux = fr
            .taps
            .iter()
            .enumerate()
            .map(|(k, &tap)| {
                let a = aux_node(&mut g, tap, k + 1)?;
                up.node(&mut g, a)
            })
            .collect::<Result<Vec<_>>>()?;
        let target: Vec<f64> = video.masks[t].iter().map(|&b| f64::from(u8::from(b))).collect();
        terms.push((loss_node(&mut g, main, &aux, &target, opts.aux_weight)?, 1.0 / n));
    }
    let total = g.weighted_sum(&terms)?;
    let value = g.value(total).at(0, 0);
    let grads = g.backward(total)?;
    Ok((value, grads.params()))
}

/// Text embedding plus visual features and taps of one frame.
pub fn frame_features(
    model: &Locater,
    frame: &Tensor,
    text: &TextEmbedding,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::inference(&model.params);
    let e = g.constant(text.tokens.clone())?;
    let nodes = encode_frame(&mut g, frame, e, &text.pad_mask, &model.config)?;
    let taps: Vec<Tensor> = nodes.taps.iter().map(|&v| g.value(v).clone()).collect();
    Ok((g.value(nodes.v).clone(), taps))
}

/// Builds the global memory from the sampled frames of a video.
pub fn global_memory_for(
    model: &Locater,
    frames: &[Tensor],
    text: &TextEmbedding,
    interval: usize,
) -> Result<GlobalMemory> {
    let mut mem = GlobalMemory::initial(&model.params, &model.config)?;
    let picks = sampled_frames(frames.len(), interval)?;
    if mem.is_empty() {
        return Ok(mem);
    }
    for t in picks {
        let (v, _) = frame_features(model, &frames[t], text)?;
        mem = memory::global_write(&v, &mem, &model.params, Gate::Learned)?;
    }
    Ok(mem)
}

/// Frame-by-frame segmentation against a fixed global memory.
pub struct Segmenter<'m> {
    model: &'m Locater,
    text: TextEmbedding,
    global: GlobalMemory,
    local: LocalMemory,
    upsampler: Upsampler,
    pending: Option<(Tensor, Vec<f64>)>,
    threshold: f64,
}

impl<'m> Segmenter<'m> {
    pub fn new(model: &'m Locater, text: TextEmbedding, global: GlobalMemory) -> Result<Self> {
        Ok(Self {
            local: LocalMemory::initial(&model.params, &model.config)?,
            upsampler: Upsampler::for_config(&model.config)?,
            model,
            text,
            global,
            pending: None,
            threshold: THRESHOLD,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn global(&self) -> &GlobalMemory {
        &self.global
    }

    pub fn local(&self) -> &LocalMemory {
        &self.local
    }

    /// Context vectors currently held by both memories.
    pub fn context_vectors(&self) -> usize {
        self.global.len() + self.local.len()
    }

    /// Index of the next frame to segment.
    pub fn frame_index(&self) -> usize {
        self.local.frame_index
    }

    pub fn step(&mut self, frame: &Tensor) -> Result<SegmentationResult> {
        let cfg = &self.model.config;
        let params = &self.model.params;
        if let Some((v, probs)) = self.pending.take() {
            let index = self.local.frame_index;
            if self.local.is_empty() {
                self.local.frame_index += 1;
            } else {
                self.local = local_write(&v, &probs, index, &self.local, cfg.grid(), params, Gate::Learned)?;
            }
        }
        let mut g = Graph::inference(params);
        let e = g.constant(self.text.tokens.clone())?;
        let fr = encode_frame(&mut g, frame, e, &self.text.pad_mask, cfg)?;
        let gm = if self.global.is_empty() {
            None
        } else {
            Some(g.constant(self.global.cells.clone())?)
        };
        let lm = if self.local.is_empty() {
            None
        } else {
            Some(g.constant(self.local.cells.clone())?)
        };
        let ctx = read_node(&mut g, fr.v, gm, lm)?;
        let s = summarize_node(&mut g, fr.v, gm, lm)?;
        let (q, a) = query_node(&mut g, e, &self.text.pad_mask, s)?;
        let probs = decode_node(&mut g, ctx, q)?;
        let patch_probs = g.value(probs).data().to_vec();
        let mut aux_probs = Vec::with_capacity(fr.taps.len());
        for (k, &tap) in fr.taps.iter().enumerate() {
            let p = aux_node(&mut g, tap, k + 1)?;
            aux_probs.push(g.value(p).data().to_vec());
        }
        let pixel_probs = self.upsampler.apply(&patch_probs)?;
        let binary = binarize(&pixel_probs, self.threshold);
        self.pending = Some((g.value(fr.v).clone(), patch_probs.clone()));
        Ok(SegmentationResult {
            patch_probs,
            pixel_probs,
            binary,
            aux_probs,
            word_attn: g.value(a).data().to_vec(),
        })
    }
}

pub fn encode_expression(model: &Locater, expression: &[usize]) -> Result<TextEmbedding> {
    encoders::encode_text(expression, &model.config, &model.params)
}

/// Builds the global memory once, then segments every frame in order.
pub fn segment_video(
    model: &Locater,
    frames: &[Tensor],
    expression: &[usize],
    interval: usize,
) -> Result<Vec<SegmentationResult>> {
    let text = encode_expression(model, expression)?;
    let global = global_memory_for(model, frames, &text, interval)?;
    let mut seg = Segmenter::new(model, text, global)?;
    frames.iter().map(|f| seg.step(f)).collect()
}
