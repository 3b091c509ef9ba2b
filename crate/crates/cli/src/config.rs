//! `--config` files: a `[model]` and a `[train]` table, both optional.

use std::path::Path;

use gebc::datamodel::ModelConfig;
use gebc::training::TrainConfig;
use gebc::{GebcError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| GebcError::Config {
            key: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GebcError::Config {
            key: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// One-line digest of the optimisation settings.
    pub fn summary(&self) -> String {
        let t = &self.train;
        format!(
            "lr {:e} weight decay {:e} batch {} epochs {} hidden {} L {} regions {} max len {}",
            t.initial_lr,
            t.weight_decay,
            t.batch_size,
            t.num_epochs,
            self.model.hidden_dim,
            self.model.target_length,
            self.model.max_regions,
            self.model.max_caption_len
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml_str("", "x").unwrap();
        assert_eq!(c.train.initial_lr, 5e-5);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.model.hidden_dim, 512);
        assert_eq!(c.model.target_length, 100);
        assert_eq!(c.model.max_regions, 50);
        assert_eq!(c.model.max_caption_len, 30);
        let echo = c.to_toml();
        let v: toml::Value = toml::from_str(&echo).unwrap();
        assert_eq!(v["train"]["initial_lr"].as_float(), Some(5e-5));
        assert!(c.summary().contains("lr 5e-5"), "{}", c.summary());
        assert_eq!(RunConfig::from_toml_str(&echo, "echo").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let err = RunConfig::from_toml_str("[train]\nlearning_rate = 1.0\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml") && msg.contains("learning_rate"), "{msg}");
        let err = RunConfig::from_toml_str("[model]\nhidden_dim = \"big\"\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("hidden_dim"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nhidden_dim = 30\nattention_heads = 8\n", "c").unwrap_err();
        assert!(matches!(err, GebcError::Config { .. }));
    }
}
