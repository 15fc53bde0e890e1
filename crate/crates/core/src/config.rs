//! Flat `key=value` run configuration with dotted sections `model.*`,
//! `train.*` and `data.*`. Blank lines and `#` comments are ignored;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable overriding the seeds of a config file.
pub const SEED_ENV: &str = "SQZT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Where the trainer writes per-epoch checkpoints; not part of the file.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::full(),
            data: DataConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    /// Toy network on 48×48 direction videos with the desk training defaults.
    pub fn toy() -> Self {
        let data = DataConfig::default();
        Self {
            model: ModelConfig {
                input_resolution: data.spec.resolution,
                num_classes: crate::data::NUM_CLASSES,
                reduction: 0.5,
                stem_channels: 12,
                stage_channels: [12, 24, 48, 96],
                ..ModelConfig::toy()
            },
            train: TrainConfig::default(),
            data,
            checkpoint_dir: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim().split_once('.') {
            Some(("model", k)) => self.model.set(k, value),
            Some(("train", k)) => self.train.set(k, value),
            Some(("data", k)) => self.data.set(k, value),
            _ => Err(Error::Config(format!("unknown key {key:?} (expected model.*, train.* or data.*)"))),
        }
    }

    /// Applies the settings of `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults (the full-size network) overlaid with the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}{}", self.model.to_kv(), self.train.to_kv(), self.data.to_kv())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Seed precedence: explicit flag, then `SQZT_SEED`, then the file.
    /// The winner replaces both the training and the data seed.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env) {
            self.train.seed = seed;
            self.data.spec.seed = seed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_and_comments() {
        let mut cfg = RunConfig::toy();
        cfg.train.epochs = 7;
        cfg.data.shuffle_frames = true;
        let mut back = RunConfig::default();
        back.apply_str(&format!("# header\n\n{}", cfg.to_kv())).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_str("model.depth=3").is_err());
        assert!(cfg.apply_str("optimizer.lr=3").is_err());
        assert!(cfg.apply_str("train.lr0").is_err());
        let err = cfg.apply_str("train.epochs=5\ntrain.bogus=1").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
