//! Training configuration: a flat TOML-compatible record of every
//! architectural and optimization hyperparameter.

use crate::error::{Error, Result};
use crate::gfe::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Weight of the segmentation Dice term in the generator objective.
    pub alpha: f64,
    /// Weight of the edge Dice term in the generator objective.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// (D, H, W); every component divisible by 8.
    pub input_shape: [usize; 3],
    /// Encoder stage widths, strictly increasing.
    pub channels: [usize; 4],
    pub dcm: bool,
    pub scam: bool,
    pub eem: bool,
    pub seed: u64,
    /// Fraction of the dataset (taken from the end, in sorted case order)
    /// held out for validation.
    pub val_fraction: f64,
    pub dcm_frozen: bool,
    pub pretrained_dcm: Option<PathBuf>,
    /// Optional early stop: end training once validation Dice reaches this
    /// value (and `stop_hd_vox`, when set, is also met). The epoch budget
    /// in `epochs` still bounds the run.
    pub stop_dice: Option<f64>,
    pub stop_hd_vox: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            alpha: 1.0,
            beta: 0.5,
            epochs: 200,
            batch_size: 1,
            input_shape: [32, 48, 48],
            channels: [16, 32, 64, 128],
            dcm: true,
            scam: true,
            eem: true,
            seed: 17,
            val_fraction: 0.2,
            dcm_frozen: false,
            pretrained_dcm: None,
            stop_dice: None,
            stop_hd_vox: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {v}")));
            }
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (axis, len) in ["depth", "height", "width"].iter().zip(self.input_shape) {
            if len == 0 || len % 8 != 0 {
                return Err(Error::Config(format!(
                    "input_shape {axis} {len} must be a positive multiple of 8"
                )));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            dcm: self.dcm,
            scam: self.scam,
            eem: self.eem,
            dcm_frozen: self.dcm_frozen,
            pretrained_dcm: self.pretrained_dcm.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.adam_beta1, 0.9);
        assert_eq!(c.adam_beta2, 0.999);
        assert_eq!(c.alpha, 1.0);
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.channels, [16, 32, 64, 128]);
        assert!(c.dcm && c.scam && c.eem);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = TrainConfig::default();
        c.epochs = 42;
        c.stop_dice = Some(0.9);
        let text = c.to_toml();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn flat_key_value_text_parses() {
        let text = "learning_rate = 0.00001\nepochs = 3\ninput_shape = [16, 24, 24]\nchannels = [8, 16, 32, 64]\ndcm = false\n";
        let c = TrainConfig::from_toml(text).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.channels, [8, 16, 32, 64]);
        assert!(!c.dcm);
        assert!(c.scam); // untouched defaults survive
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::default();
        c.input_shape = [30, 48, 48];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.channels = [32, 32, 64, 128];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_toml("no_such_field = 1").is_err());
    }
}
