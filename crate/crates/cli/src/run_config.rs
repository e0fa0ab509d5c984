//! `key = value` run configuration: training settings, scene settings and
//! paths, with file values overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use locater::corpus::{SceneConfig, SceneKind};
use locater::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub count: usize,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            count: 8,
            corpus: PathBuf::from("data/train"),
            checkpoint: PathBuf::from("locater.ckpt"),
            output: PathBuf::from("out"),
        }
    }
}

fn kind_name(k: SceneKind) -> &'static str {
    match k {
        SceneKind::Motion => "motion",
        SceneKind::Falls => "falls",
        SceneKind::Mixed => "mixed",
    }
}

pub fn parse_kind(s: &str) -> Result<SceneKind> {
    Ok(match s {
        "motion" => SceneKind::Motion,
        "falls" => SceneKind::Falls,
        "mixed" => SceneKind::Mixed,
        _ => bail!("scene_kind must be motion, falls or mixed, got {s:?}"),
    })
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("bad value {v:?} for {key}"))
}

impl RunConfig {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.scene;
        let mut out: Vec<(String, String)> = self
            .train
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let extra = [
            ("count", self.count.to_string()),
            ("scene_frames", s.frames.to_string()),
            ("scene_kind", kind_name(s.kind).to_string()),
            ("min_objects", s.min_objects.to_string()),
            ("max_objects", s.max_objects.to_string()),
            ("min_radius", s.min_radius.to_string()),
            ("max_radius", s.max_radius.to_string()),
            ("corpus", self.corpus.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("output", self.output.display().to_string()),
        ];
        out.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "count" => self.count = num(key, v)?,
            "scene_frames" => self.scene.frames = num(key, v)?,
            "scene_kind" => self.scene.kind = parse_kind(v)?,
            "min_objects" => self.scene.min_objects = num(key, v)?,
            "max_objects" => self.scene.max_objects = num(key, v)?,
            "min_radius" => self.scene.min_radius = num(key, v)?,
            "max_radius" => self.scene.max_radius = num(key, v)?,
            "corpus" => self.corpus = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            _ => {
                self.train.set(key, v)?;
                // frame geometry is shared by the scenes and the model
                match key {
                    "frame_width" => self.scene.width = self.train.model.frame_width,
                    "frame_height" => self.scene.height = self.train.model.frame_height,
                    "channels" => self.scene.channels = self.train.model.channels,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects key=value, got {s:?}"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn header(&self) -> String {
        self.pairs()
            .iter()
            .map(|(k, v)| format!("# {k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("lr = 0.01\nscene_kind = falls # comment\n\nframe_width=32\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.scene.kind, SceneKind::Falls);
        assert_eq!(cfg.scene.width, 32);
        let text: String = cfg.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("learning_rate = 1").is_err());
        assert!(cfg.apply_text("lr").is_err());
        assert!(cfg.apply_text("count = many").is_err());
    }
}
