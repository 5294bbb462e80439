//! Model and training configuration, plus the plain-text `key = value`
//! format used by config files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture and streaming parameters of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width `D`.
    pub d_model: usize,
    /// Input feature width.
    pub d_in: usize,
    pub classes: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the context-embedding MLP.
    pub d_mid: usize,
    /// Width of the class projection inside a visual context.
    pub d_c: usize,
    /// Number of past visual contexts kept as keys/values.
    pub k: usize,
    /// Per-class decode cutoff.
    pub threshold: f64,
    /// Raw frames per feature chunk.
    pub chunk_len: usize,
    pub fps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            d_in: 4096,
            classes: 20,
            heads: 8,
            blocks: 4,
            d_mid: 256,
            d_c: 256,
            k: 7,
            threshold: 0.3,
            chunk_len: 6,
            fps: 30.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and desk-scale experiments.
    pub fn toy(d_in: usize, classes: usize, k: usize) -> Self {
        ModelConfig {
            d_model: 16,
            d_in,
            classes,
            heads: 4,
            blocks: 4,
            d_mid: 16,
            d_c: 16,
            k,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_in", self.d_in),
            ("classes", self.classes),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("d_mid", self.d_mid),
            ("d_c", self.d_c),
            ("k", self.k),
            ("chunk_len", self.chunk_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps {} must be positive", self.fps)));
        }
        Ok(())
    }

    /// Sets one field from its config-file key. Returns `false` for keys
    /// that belong to another section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "d_in" => self.d_in = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "d_mid" => self.d_mid = parse(key, value)?,
            "d_c" => self.d_c = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "chunk_len" => self.chunk_len = parse(key, value)?,
            "fps" => self.fps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// How far gradients travel back through stored contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backprop {
    /// Stored contexts are constants; only the projections that turn them
    /// into key rows at the current step are differentiated.
    Truncated,
    /// One graph over the whole sequence.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Learning rate of the transformer, projections and classifier.
    pub lr_main: f64,
    /// Learning rate of the context-embedding MLP.
    pub lr_ctx: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_step_size: usize,
    pub lr_factor: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub backprop: Backprop,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.25,
            gamma: 2.0,
            lr_main: 1e-4,
            lr_ctx: 1e-5,
            batch_size: 256,
            epochs: 16,
            lr_step_size: 3,
            lr_factor: 0.1,
            dropout: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            backprop: Backprop::Truncated,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {} must be non-negative", self.gamma)));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_ctx", self.lr_ctx), ("lr_factor", self.lr_factor)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        if self.batch_size == 0 || self.lr_step_size == 0 {
            return Err(Error::Config("batch_size and lr_step_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lr_main" => self.lr_main = parse(key, value)?,
            "lr_ctx" => self.lr_ctx = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_step_size" => self.lr_step_size = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "backprop" => {
                self.backprop = match value {
                    "truncated" => Backprop::Truncated,
                    "full" => Backprop::Full,
                    other => {
                        return Err(Error::Config(format!("backprop must be truncated|full, got {other}")))
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Applies a parsed config file to both sections; unknown keys are errors.
pub fn apply_kv(
    entries: &BTreeMap<String, String>,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    for (k, v) in entries {
        if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_published_settings() {
        let m = ModelConfig::default();
        assert_eq!((m.blocks, m.heads, m.k), (4, 8, 7));
        assert_eq!(m.threshold, 0.3);
        assert_eq!(m.chunk_len, 6);
        let t = TrainConfig::default();
        assert_eq!(t.dropout, 0.1);
        assert_eq!((t.batch_size, t.epochs, t.lr_step_size), (256, 16, 3));
        assert_eq!((t.lr_main, t.lr_ctx), (1e-4, 1e-5));
        m.validate().unwrap();
        t.validate().unwrap();
    }

    #[test]
    fn kv_parsing_and_overrides() {
        let text = "# comment\nk = 3\nthreshold=0.5 # inline\n\nlr_main = 0.01\n";
        let kv = parse_kv(text).unwrap();
        let mut m = ModelConfig::default();
        let mut t = TrainConfig::default();
        apply_kv(&kv, &mut m, &mut t).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(m.threshold, 0.5);
        assert_eq!(t.lr_main, 0.01);

        let bad = parse_kv("nope = 1").unwrap();
        assert!(apply_kv(&bad, &mut m, &mut t).is_err());
        assert!(parse_kv("just words").is_err());
        assert!(m.set("k", "three").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut m = ModelConfig::toy(8, 3, 2);
        m.heads = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::toy(8, 3, 2);
        m.threshold = 1.0;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::toy(8, 3, 2);
        m.k = 0;
        assert!(m.validate().is_err());
        let t = TrainConfig {
            alpha: 1.0,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }
}
