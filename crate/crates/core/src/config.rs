use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by every module.
///
/// Memory capacities are stored as multiples of the patch count so the
/// `N_g = 1.5 N_v`, `N_l = 2 N_v` ratios survive changes of resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Cross-modality modules `K`.
    pub modules: usize,
    /// Patch side `O` in pixels.
    pub patch: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub channels: usize,
    /// Fixed expression length `N_w`.
    pub max_words: usize,
    pub vocab_size: usize,
    pub global_ratio: f64,
    pub local_ratio: f64,
    /// Global-memory sampling interval in frames.
    pub interval: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 64×64 frames, 8-pixel patches, `D = 32`, `K = 3`.
    pub fn toy() -> Self {
        Self {
            dim: 32,
            heads: 4,
            modules: 3,
            patch: 8,
            frame_width: 64,
            frame_height: 64,
            channels: 3,
            max_words: 12,
            vocab_size: crate::corpus::standard_vocabulary().len(),
            global_ratio: 1.5,
            local_ratio: 2.0,
            interval: 10,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_width / self.patch, self.frame_height / self.patch)
    }

    /// `N_v`.
    pub fn patches(&self) -> usize {
        let (gw, gh) = self.grid();
        gw * gh
    }

    /// `N_g`.
    pub fn global_cells(&self) -> usize {
        (self.global_ratio * self.patches() as f64).round() as usize
    }

    /// `N_l`.
    pub fn local_cells(&self) -> usize {
        (self.local_ratio * self.patches() as f64).round() as usize
    }

    pub fn patch_input(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Copy with both memories disabled (the read path then bypasses them).
    pub fn without_memory(&self) -> Self {
        Self {
            global_ratio: 0.0,
            local_ratio: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("patch", self.patch),
            ("frame_width", self.frame_width),
            ("frame_height", self.frame_height),
            ("channels", self.channels),
            ("max_words", self.max_words),
            ("vocab_size", self.vocab_size),
            ("interval", self.interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.modules < 1 {
            return Err(Error::Config("cross-modality encoder needs K >= 1".into()));
        }
        if self.frame_width % self.patch != 0 || self.frame_height % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch {}",
                self.frame_width, self.frame_height, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config("dim must be even".into()));
        }
        if !(self.global_ratio >= 0.0 && self.local_ratio >= 0.0) {
            return Err(Error::Config("memory ratios must be non-negative".into()));
        }
        Ok(())
    }
}
