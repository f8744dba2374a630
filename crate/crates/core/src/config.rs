//! Training configuration and its line-oriented `key = value` text form.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.
//!
//! ```text
//! learning_rate = 0.001
//! batch_size = 8
//! max_steps = 300
//! anchor = auto
//! use_similarity_loss = false
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::NegativeAggregation;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{LossWeights, ObjectiveConfig};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnchorSetting {
    /// Mean ground-truth box size over the training split.
    Auto,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    /// Small widths for CPU training.
    Desk,
    /// `C = 256`, `d = 512`, head width 256.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps, checked before every step.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub use_mope: bool,
    pub use_cvmf_concat: bool,
    pub use_similarity_loss: bool,
    pub anchor: AnchorSetting,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss_weights: LossWeights,
    pub negatives: NegativeAggregation,
    pub model: ModelPreset,
    pub fuse_activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 24,
            max_steps: None,
            seed: 0,
            use_mope: true,
            use_cvmf_concat: true,
            use_similarity_loss: true,
            anchor: AnchorSetting::Auto,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss_weights: LossWeights::default(),
            negatives: NegativeAggregation::Mean,
            model: ModelPreset::Desk,
            fuse_activation: Activation::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer moments need beta in [0, 1) and epsilon > 0".into()));
        }
        if let AnchorSetting::Fixed(w, h) = self.anchor {
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Config(format!("anchor {w},{h} must be positive")));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.loss_weights,
            use_similarity_loss: self.use_similarity_loss,
            aggregation: self.negatives,
        }
    }

    /// Network configuration for a resolved anchor.
    pub fn model_config(&self, anchor: (f64, f64)) -> ModelConfig {
        let base = match self.model {
            ModelPreset::Desk => ModelConfig::desk(),
            ModelPreset::Full => ModelConfig::default(),
        };
        ModelConfig {
            anchor,
            fuse_activation: self.fuse_activation,
            use_mope: self.use_mope,
            use_cvmf_concat: self.use_cvmf_concat,
            ..base
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "use_mope" => self.use_mope = num(key, value)?,
            "use_cvmf_concat" => self.use_cvmf_concat = num(key, value)?,
            "use_similarity_loss" => self.use_similarity_loss = num(key, value)?,
            "anchor" => {
                self.anchor = match value {
                    "auto" => AnchorSetting::Auto,
                    v => {
                        let (w, h) = v.split_once(',').ok_or_else(|| format!("anchor `{v}` is not `auto` or `w,h`"))?;
                        AnchorSetting::Fixed(num(key, w.trim())?, num(key, h.trim())?)
                    }
                }
            }
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "weight_cn" => self.loss_weights.cn = num(key, value)?,
            "weight_reg" => self.loss_weights.reg = num(key, value)?,
            "weight_s" => self.loss_weights.s = num(key, value)?,
            "negatives" => {
                self.negatives = match value {
                    "mean" => NegativeAggregation::Mean,
                    "min" => NegativeAggregation::Min,
                    v => return Err(format!("negatives `{v}` is not mean or min")),
                }
            }
            "model" => {
                self.model = match value {
                    "desk" => ModelPreset::Desk,
                    "full" => ModelPreset::Full,
                    v => return Err(format!("model `{v}` is not desk or full")),
                }
            }
            "fuse_activation" => {
                self.fuse_activation = match value {
                    "identity" => Activation::Identity,
                    "silu" => Activation::Silu,
                    "relu" => Activation::Relu,
                    v => return Err(format!("activation `{v}` is not identity, silu or relu")),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.map_or("none".into(), |n| n.to_string()));
        kv("seed", self.seed.to_string());
        kv("use_mope", self.use_mope.to_string());
        kv("use_cvmf_concat", self.use_cvmf_concat.to_string());
        kv("use_similarity_loss", self.use_similarity_loss.to_string());
        kv(
            "anchor",
            match self.anchor {
                AnchorSetting::Auto => "auto".into(),
                AnchorSetting::Fixed(w, h) => format!("{w},{h}"),
            },
        );
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("weight_cn", self.loss_weights.cn.to_string());
        kv("weight_reg", self.loss_weights.reg.to_string());
        kv("weight_s", self.loss_weights.s.to_string());
        kv(
            "negatives",
            match self.negatives {
                NegativeAggregation::Mean => "mean",
                NegativeAggregation::Min => "min",
            }
            .into(),
        );
        kv(
            "model",
            match self.model {
                ModelPreset::Desk => "desk",
                ModelPreset::Full => "full",
            }
            .into(),
        );
        kv(
            "fuse_activation",
            match self.fuse_activation {
                Activation::Identity => "identity",
                Activation::Silu => "silu",
                Activation::Relu => "relu",
            }
            .into(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (1e-4, 8, 24));
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig {
            learning_rate: 3e-3,
            max_steps: Some(300),
            anchor: AnchorSetting::Fixed(18.5, 20.0),
            use_similarity_loss: false,
            negatives: NegativeAggregation::Min,
            fuse_activation: Activation::Silu,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_text(), Path::new("c")).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::parse("# comment\n\nseed = 7 # trailing\n", Path::new("c")).unwrap();
        assert_eq!(c.seed, 7);
        for bad in ["sed = 1", "seed 1", "batch_size = 0", "learning_rate = x", "anchor = 3"] {
            assert!(TrainConfig::parse(bad, Path::new("c")).is_err(), "{bad}");
        }
        match TrainConfig::parse("seed = 1\nbogus = 2", Path::new("cfg.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
