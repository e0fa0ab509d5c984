//! Patch and word embeddings and the stacked cross-modality encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{encoder_block, BlockShape, Graph, Init, ParamTree, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token table; line index in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a table with `<pad>` and `<unk>` prepended to `words`.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("bad vocabulary token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t}")));
            }
        }
        if tokens.len() < 2 {
            return Err(Error::Format("vocabulary lacks pad/unk entries".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary(id))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.token(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    /// `[N_v, D]`, row `gy * gw + gx`.
    pub tokens: Tensor,
    /// `(W / O, H / O)`.
    pub grid: (usize, usize),
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// `[N_w, D]`.
    pub tokens: Tensor,
    /// True for real words.
    pub pad_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub v: Tensor,
    /// One `[N_v, D]` tap per module; the last equals `v`.
    pub taps: Vec<Tensor>,
}

pub fn init<R: Rng>(cfg: &ModelConfig, init: &mut Init<'_, R>) -> Result<()> {
    let d = cfg.dim;
    init.weight("patch.proj.w", cfg.patch_input(), d)?;
    init.zeros("patch.proj.b", &[1, d])?;
    init.normal("patch.pos", &[cfg.patches(), d], 0.02)?;
    init.normal("text.embed", &[cfg.vocab_size, d], 1.0)?;
    init.normal("text.pos", &[cfg.max_words, d], 0.02)?;
    let shape = BlockShape::new(d, cfg.heads);
    shape.init(init, "text.block")?;
    init.normal("fuse.eps_v", &[1, d], 0.02)?;
    init.normal("fuse.eps_w", &[1, d], 0.02)?;
    for k in 1..=cfg.modules {
        shape.init(init, &format!("fuse.k{k}.joint"))?;
        shape.init(init, &format!("fuse.k{k}.refine"))?;
    }
    Ok(())
}

/// Rearranges an `[H, W, C]` frame into `[N_v, O*O*C]` patch rows.
pub fn patch_rows(frame: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (w, h, c, o) = (cfg.frame_width, cfg.frame_height, cfg.channels, cfg.patch);
    if frame.shape() != [h, w, c] {
        return Err(dim_err!(
            "frame shape {:?}, expected [{h}, {w}, {c}]",
            frame.shape()
        ));
    }
    if w % o != 0 || h % o != 0 {
        return Err(Error::Config(format!("{w}x{h} frame not divisible by patch {o}")));
    }
    let (gw, gh) = (w / o, h / o);
    let src = frame.data();
    let width = o * o * c;
    let mut out = Vec::with_capacity(gw * gh * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..o {
                let start = ((gy * o + dy) * w + gx * o) * c;
                out.extend_from_slice(&src[start..start + o * c]);
            }
        }
    }
    Ok(Tensor::matrix(gw * gh, width, out))
}

/// Linear patch projection plus the learned per-slot position table.
pub fn patchify_node(g: &mut Graph, frame: &Tensor, cfg: &ModelConfig) -> Result<Var> {
    let rows = g.constant(patch_rows(frame, cfg)?)?;
    let w = g.param("patch.proj.w")?;
    let b = g.param("patch.proj.b")?;
    let pos = g.param("patch.pos")?;
    let y = g.matmul(rows, w)?;
    let y = g.add_row(y, b)?;
    g.add(y, pos)
}

pub fn patchify(frame: &Tensor, cfg: &ModelConfig, params: &ParamTree) -> Result<PatchEmbedding> {
    let mut g = Graph::inference(params);
    let v = patchify_node(&mut g, frame, cfg)?;
    Ok(PatchEmbedding {
        tokens: g.value(v).clone(),
        grid: cfg.grid(),
        patch: cfg.patch,
    })
}

/// Pads or truncates to `N_w` and returns the id list plus real-word mask.
pub fn pad_tokens(ids: &[usize], cfg: &ModelConfig) -> Result<(Vec<usize>, Vec<bool>)> {
    if ids.is_empty() {
        return Err(Error::Input("expression has no words".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocabulary(bad));
    }
    let n = ids.len().min(cfg.max_words);
    let mut out = ids[..n].to_vec();
    let mut mask = vec![true; n];
    out.resize(cfg.max_words, PAD);
    mask.resize(cfg.max_words, false);
    Ok((out, mask))
}

/// Embedding lookup, position table and one encoder block with pads hidden
/// as keys. Returns the `[N_w, D]` node and the real-word mask.
pub fn encode_text_node(
    g: &mut Graph,
    ids: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Vec<bool>)> {
    let (ids, mask) = pad_tokens(ids, cfg)?;
    let mut onehot = vec![0.0; cfg.max_words * cfg.vocab_size];
    for (r, &id) in ids.iter().enumerate() {
        onehot[r * cfg.vocab_size + id] = 1.0;
    }
    let sel = g.constant(Tensor::matrix(cfg.max_words, cfg.vocab_size, onehot))?;
    let table = g.param("text.embed")?;
    let pos = g.param("text.pos")?;
    let e = g.matmul(sel, table)?;
    let e = g.add(e, pos)?;
    let out = encoder_block(g, e, "text.block", cfg.heads, Some(&mask))?;
    Ok((out, mask))
}

pub fn encode_text(ids: &[usize], cfg: &ModelConfig, params: &ParamTree) -> Result<TextEmbedding> {
    let mut g = Graph::inference(params);
    let (e, pad_mask) = encode_text_node(&mut g, ids, cfg)?;
    Ok(TextEmbedding {
        tokens: g.value(e).clone(),
        pad_mask,
    })
}

/// Runs the `K` fusion modules; returns every module's visual output.
pub fn fuse_node(
    g: &mut Graph,
    patches: Var,
    text: Var,
    pad_mask: &[bool],
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    if cfg.modules < 1 {
        return Err(Error::Config("cross-modality encoder needs K >= 1".into()));
    }
    let (nv, d) = g.shape(patches);
    let (nw, dw) = g.shape(text);
    if d != dw || pad_mask.len() != nw {
        return Err(dim_err!(
            "fusion inputs {nv}x{d} and {nw}x{dw} with {} mask entries",
            pad_mask.len()
        ));
    }
    let eps_v = g.param("fuse.eps_v")?;
    let eps_w = g.param("fuse.eps_w")?;
    let words = g.add_row(text, eps_w)?;
    let mut key_mask = vec![true; nv];
    key_mask.extend_from_slice(pad_mask);
    let mut prev = patches;
    let mut taps = Vec::with_capacity(cfg.modules);
    for k in 1..=cfg.modules {
        let vis = g.add_row(prev, eps_v)?;
        let joint = g.concat_rows(&[vis, words])?;
        let f1 = encoder_block(g, joint, &format!("fuse.k{k}.joint"), cfg.heads, Some(&key_mask))?;
        let f1 = g.slice_rows(f1, 0, nv)?;
        prev = encoder_block(g, f1, &format!("fuse.k{k}.refine"), cfg.heads, None)?;
        taps.push(prev);
    }
    Ok(taps)
}

pub fn cross_modal_fuse(
    patches: &PatchEmbedding,
    text: &TextEmbedding,
    cfg: &ModelConfig,
    params: &ParamTree,
) -> Result<FusionOutput> {
    let mut g = Graph::inference(params);
    let p = g.constant(patches.tokens.clone())?;
    let t = g.constant(text.tokens.clone())?;
    let taps = fuse_node(&mut g, p, t, &text.pad_mask, cfg)?;
    let taps: Vec<Tensor> = taps.iter().map(|&v| g.value(v).clone()).collect();
    Ok(FusionOutput {
        v: taps.last().expect("K >= 1").clone(),
        taps,
    })
}
