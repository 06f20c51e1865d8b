use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::{ModelConfig, ReaderMode};

/// Hyperparameters of a training run. Defaults are the desk-scale preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mode: ReaderMode,
    pub seed: u64,
    /// `None` keeps the whole vocabulary.
    pub shortlist_size: Option<usize>,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Also measure accuracy on the training set after every epoch.
    pub log_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            batch_size: 32,
            clip_threshold: 10.0,
            epochs: 10,
            dropout_rate: 0.0,
            embed_dim: 16,
            hidden_dim: 16,
            mode: ReaderMode::Avg,
            seed: 0,
            shortlist_size: None,
            patience: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_train_accuracy: false,
        }
    }
}

pub const PRESETS: [&str; 4] = ["desk", "people-daily", "cnn", "cbt"];

impl TrainConfig {
    /// Named dimension presets: `desk` (16/16, no dropout), `people-daily`
    /// (256/256, dropout 0.1, 100K shortlist), `cnn` (384/256) and `cbt`
    /// (384/384), the last two without truncation or dropout.
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        let (embed_dim, hidden_dim, dropout_rate, shortlist_size) = match name {
            "desk" => return Ok(base),
            "people-daily" => (256, 256, 0.1, Some(100_000)),
            "cnn" => (384, 256, 0.0, None),
            "cbt" => (384, 384, 0.0, None),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(TrainConfig {
            embed_dim,
            hidden_dim,
            dropout_rate,
            shortlist_size,
            ..base
        })
    }

    /// Parses a JSON config. An optional `"preset"` key selects the base
    /// that the remaining keys override; otherwise the base is `desk`.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(format!("invalid training config: {e}"));
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("training config must be a JSON object".into()))?;
        let base = match obj.remove("preset") {
            None => TrainConfig::default(),
            Some(serde_json::Value::String(name)) => TrainConfig::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(base).map_err(bad)?;
        let target = merged.as_object_mut().expect("config serialises to an object");
        for (k, v) in std::mem::take(obj) {
            target.insert(k, v);
        }
        let config: TrainConfig = serde_json::from_value(merged).map_err(bad)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return fail("batch_size, embed_dim and hidden_dim must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_threshold > 0.0) || !(self.epsilon > 0.0) {
            return fail("lr, clip_threshold and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must be in [0, 1)".into());
        }
        if self.shortlist_size == Some(0) || self.patience == Some(0) {
            return fail("shortlist_size and patience must be positive when set".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            dropout_rate: self.dropout_rate,
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_preset() {
        let c = TrainConfig::default();
        assert_eq!(c, TrainConfig::preset("desk").unwrap());
        assert_eq!((c.lr, c.batch_size, c.clip_threshold), (0.0005, 32, 10.0));
        c.validate().unwrap();
    }

    #[test]
    fn named_presets() {
        let p = TrainConfig::preset("people-daily").unwrap();
        assert_eq!((p.embed_dim, p.hidden_dim, p.dropout_rate), (256, 256, 0.1));
        assert_eq!(p.shortlist_size, Some(100_000));
        assert_eq!(TrainConfig::preset("cnn").unwrap().embed_dim, 384);
        assert_eq!(TrainConfig::preset("cbt").unwrap().hidden_dim, 384);
        assert!(matches!(TrainConfig::preset("imdb"), Err(Error::Config(_))));
    }

    #[test]
    fn json_overlays_a_preset() {
        let c = TrainConfig::from_json(r#"{"preset": "people-daily", "epochs": 3, "mode": "max"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.hidden_dim, 256);
        assert_eq!(c.mode, ReaderMode::Max);
        let c = TrainConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.embed_dim, 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            r#"{"epochs": 0}"#,
            r#"{"dropout_rate": 1.0}"#,
            r#"{"learning_rate": 0.1}"#,
            r#"{"lr": -1}"#,
            r#"[1]"#,
            r#"{"preset": 3}"#,
        ] {
            assert!(matches!(TrainConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }
}
