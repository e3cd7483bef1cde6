use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamWConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the world-model loss on action-labeled batches.
    pub beta: f32,
    /// Peak rate for the backbone and world model.
    pub lr_backbone: f32,
    /// Peak rate for the action head.
    pub lr_head: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Independent `(t, ε)` draws per labeled window; the flow-matching
    /// loss of a window is their mean.
    pub flow_samples: usize,
    pub seed: u64,
    /// Probability that a step draws an action-free batch.
    pub ratio: f32,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            beta: 1.0,
            lr_backbone: 3e-4,
            lr_head: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 16,
            flow_samples: 4,
            seed: 7,
            ratio: 0.25,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            checkpoint_every: 500,
        }
    }

    /// Defaults that train in minutes on one core.
    pub fn compact() -> Self {
        TrainConfig {
            model: ModelConfig::compact(),
            batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let check = |cond: bool, msg: &str| if cond { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.beta >= 0.0, "beta must be non-negative")?;
        check(self.warmup_steps <= self.total_steps, "warmup_steps must not exceed total_steps")?;
        check((0.0..=1.0).contains(&self.ratio), "ratio must lie in [0, 1]")?;
        check(self.batch_size >= 1, "batch_size must be positive")?;
        check(self.flow_samples >= 1, "flow_samples must be positive")?;
        check(self.lr_backbone >= 0.0 && self.lr_head >= 0.0, "learning rates must be non-negative")?;
        check(self.grad_clip >= 0.0, "grad_clip must be non-negative")?;
        Ok(())
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
