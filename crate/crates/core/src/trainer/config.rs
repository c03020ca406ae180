use std::path::Path;

use mipae_tensor::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{MipaeError, Result};
use crate::evalkit::EvalConfig;
use crate::nets::NetConfig;
use crate::objectives::{Baseline, LossWeights};
use crate::synthvid::DatasetConfig;

/// Everything needed to reproduce both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub lstm_batch_size: usize,
    /// Steps between checkpoint writes (0 disables periodic writes).
    pub checkpoint_interval: usize,
    /// Steps between validation passes (0 validates only at the end).
    pub validation_interval: usize,
    /// Clips held out from the end of the dataset for validation.
    pub validation_clips: usize,
    /// Probability that a reconstruction target is the offset frame rather
    /// than the content frame itself.
    pub cross_frame_prob: f64,
    pub baseline: Baseline,
    pub optimizer: AdamConfig,
    pub lstm_optimizer: AdamConfig,
    pub loss: LossWeights,
    pub net: NetConfig,
    pub data: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            steps_phase1: 20_000,
            steps_phase2: 5_000,
            lstm_batch_size: 64,
            checkpoint_interval: 1_000,
            validation_interval: 500,
            validation_clips: 64,
            cross_frame_prob: 0.5,
            baseline: Baseline::Mipae,
            optimizer: AdamConfig::default(),
            lstm_optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            net: NetConfig::default(),
            data: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MipaeError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MipaeError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            MipaeError::Config(msg) => MipaeError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Largest temporal offset between paired frames.
    pub fn max_offset(&self) -> Result<usize> {
        self.loss.resolve_offset(self.data.clip_len())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.max_offset()?;
        if self.net.frame_size != self.data.frame_size {
            return Err(MipaeError::config(format!(
                "net.frame_size {} differs from data.frame_size {}",
                self.net.frame_size, self.data.frame_size
            )));
        }
        if self.net.channels != crate::synthvid::CHANNELS {
            return Err(MipaeError::config("net.channels must match the dataset (1)"));
        }
        if self.batch_size < 2 || self.lstm_batch_size == 0 {
            return Err(MipaeError::config("batch_size must be at least 2 and lstm_batch_size positive"));
        }
        if self.data.num_sequences < self.validation_clips + self.batch_size {
            return Err(MipaeError::config(format!(
                "{} clips cannot supply {} validation clips plus a batch of {}",
                self.data.num_sequences, self.validation_clips, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.cross_frame_prob) {
            return Err(MipaeError::config("cross_frame_prob must lie in [0, 1]"));
        }
        for (name, o) in [("optimizer", &self.optimizer), ("lstm_optimizer", &self.lstm_optimizer)] {
            if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
                return Err(MipaeError::config(format!("{name}: lr and eps must be positive, betas in [0, 1)")));
            }
        }
        if self.eval.test_clips == 0 {
            return Err(MipaeError::config("eval.test_clips must be positive"));
        }
        if self.eval.test_seed == self.data.seed {
            return Err(MipaeError::config("eval.test_seed must differ from data.seed so test clips are unseen"));
        }
        Ok(())
    }

    /// Config of the held-out test set: training data settings with the
    /// evaluation seed and size.
    pub fn test_data(&self) -> DatasetConfig {
        DatasetConfig { seed: self.eval.test_seed, num_sequences: self.eval.test_clips, ..self.data.clone() }
    }
}
