//! Configuration, staged training, evaluation, inference and plotting — the
//! operational face of the crate.

mod data;
mod evaluate;
mod infer;
mod objective;
mod plot;
mod train;

pub use data::{load_split, run_generate, LoadedSequence};
pub use evaluate::{run_eval, Predictor};
pub use infer::{flow_from_bytes, flow_to_bytes, run_infer};
pub use objective::{build_model as objective_build, clip_loss, prepare_pair, ClipLossOutput, PreparedPair};
pub use plot::run_plot;
pub use train::{load_trained as load_trained_model, run_training, TrainOutcome};

use crate::error::{CoreError, Result};
use crate::losses::LossConfig;
use crate::model::NetConfig;
use crate::params::fingerprint;
use crate::synthworld::ScenarioConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// plain gradient descent
    Sgd,
    /// momentum-free adaptive step: running mean of squared gradients
    Adaptive,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub decay_per_epoch: f64,
    /// total optimizer steps for stage 2
    pub steps: usize,
    pub batch_clips: usize,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    /// stage-1 detector proxy schedule
    pub od_steps: usize,
    pub od_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adaptive,
            learning_rate: 1e-3,
            decay_per_epoch: 0.9,
            steps: 500,
            batch_clips: 1,
            clip_norm: 5.0,
            checkpoint_every: 100,
            od_steps: 200,
            od_learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// constant radar-to-reference resolution ratio used for normalized EPE
    pub resolution_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_sequences: 16, test_sequences: 4, resolution_ratio: 2.5 }
    }
}

/// Everything one run needs: model, losses, world, optimizer, data sizing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub scenario: ScenarioConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk_default() -> RunConfig {
        let net = NetConfig::desk();
        let scenario = ScenarioConfig {
            clip_len: net.clip_len,
            ..ScenarioConfig::default()
        };
        RunConfig {
            seed: 7,
            net,
            loss: LossConfig::default(),
            scenario,
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.scenario.validate()?;
        if self.optimizer.learning_rate <= 0.0
            || self.optimizer.decay_per_epoch <= 0.0
            || self.optimizer.batch_clips == 0
        {
            return Err(CoreError::Config("optimizer schedule must be positive".into()));
        }
        if self.scenario.clip_len != self.net.clip_len {
            return Err(CoreError::Config(format!(
                "scenario clip_len {} must match the model's mini-clip length {}",
                self.scenario.clip_len, self.net.clip_len
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Fingerprint of the architecture-relevant part, stored in checkpoints.
    pub fn net_fingerprint(&self) -> u64 {
        let text = toml::to_string(&self.net).expect("net config serializes");
        fingerprint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_keeps_defaults() {
        let cfg = RunConfig::desk_default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // the loss weights ride through the round trip at their defaults
        assert_eq!(back.loss.lambda_bg, 0.5);
        assert_eq!(back.loss.lambda_opt, 0.1);
        assert_eq!(back.optimizer.learning_rate, 1e-3);
        assert_eq!(back.optimizer.decay_per_epoch, 0.9);
    }

    #[test]
    fn mismatched_clip_lengths_rejected() {
        let mut cfg = RunConfig::desk_default();
        cfg.scenario.clip_len = cfg.net.clip_len + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_net_changes() {
        let cfg = RunConfig::desk_default();
        let a = cfg.net_fingerprint();
        let mut cfg2 = cfg.clone();
        cfg2.net.embed_channels += 8;
        assert_ne!(a, cfg2.net_fingerprint());
        // non-architecture fields leave it unchanged
        let mut cfg3 = cfg.clone();
        cfg3.optimizer.steps += 100;
        assert_eq!(a, cfg3.net_fingerprint());
    }
}
