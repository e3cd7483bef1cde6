//! Model shape configuration.

use serde::{Deserialize, Serialize};

use crate::data_synth::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::nn::StackConfig;

/// Number of latent tokens per horizon: `K = LATENT_BUDGET / T`.
pub const LATENT_BUDGET: usize = 24;
/// Views after ingestion.
pub const VIEWS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    /// Future horizon `T` (number of predicted frames).
    pub horizon: usize,
    /// Replicas per latent step; `None` derives `24 / T`.
    pub k_override: Option<usize>,
    /// Repetitions `M` of the action-conditioning token.
    pub action_tokens: usize,
    /// Actions per generated chunk.
    pub action_horizon: usize,
    pub max_instruction: usize,
    pub denoise_steps: usize,
    /// Patch size for the frozen target encoder.
    pub encoder_patch: usize,
    pub encoder: StackConfig,
    /// Patch size for the backbone's own trainable vision stem.
    pub backbone_patch: usize,
    pub backbone: StackConfig,
    pub world_model: StackConfig,
    pub head: StackConfig,
}

fn stack(layers: usize, heads: usize, width: usize) -> StackConfig {
    StackConfig {
        layers,
        heads,
        width,
        mlp_ratio: 4,
    }
}

impl ModelConfig {
    /// Default desk-scale sizes.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            action_dim: 3,
            state_dim: 8,
            horizon: 8,
            k_override: None,
            action_tokens: 32,
            action_horizon: 7,
            max_instruction: 8,
            denoise_steps: 4,
            encoder_patch: 8,
            encoder: stack(2, 4, 64),
            backbone_patch: 8,
            backbone: stack(4, 4, 128),
            world_model: stack(4, 4, 64),
            head: stack(4, 4, 128),
        }
    }

    /// Reduced sizes that train in minutes on a single core.
    pub fn compact() -> Self {
        ModelConfig {
            encoder_patch: 16,
            encoder: stack(2, 4, 64),
            backbone_patch: 16,
            backbone: stack(2, 4, 64),
            world_model: stack(2, 2, 32),
            head: stack(2, 4, 64),
            ..Self::desk()
        }
    }

    /// Smallest sensible sizes, for unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            horizon: 4,
            action_tokens: 4,
            action_horizon: 3,
            max_instruction: 6,
            encoder_patch: 8,
            encoder: stack(1, 2, 8),
            backbone_patch: 8,
            backbone: stack(1, 2, 8),
            world_model: stack(1, 2, 8),
            head: stack(1, 2, 8),
            ..Self::desk()
        }
    }

    pub fn k(&self) -> Result<usize> {
        match self.k_override {
            Some(0) => Err(Error::Config("K override must be positive".into())),
            Some(k) => Ok(k),
            None if self.horizon > 0 && LATENT_BUDGET % self.horizon == 0 => Ok(LATENT_BUDGET / self.horizon),
            None => Err(Error::Config(format!(
                "horizon {} does not divide {LATENT_BUDGET}; pass an explicit K",
                self.horizon
            ))),
        }
    }

    pub fn patches_per_view(&self, patch: usize) -> usize {
        (self.image_size / patch).pow(2)
    }

    /// Tokens per view from the target encoder (`N_v`).
    pub fn state_tokens_per_view(&self) -> usize {
        self.patches_per_view(self.encoder_patch)
    }

    /// State tokens per step (`N_s = 2 N_v`).
    pub fn state_tokens(&self) -> usize {
        VIEWS * self.state_tokens_per_view()
    }

    pub fn state_width(&self) -> usize {
        self.encoder.width
    }

    pub fn image_tokens(&self) -> usize {
        VIEWS * self.patches_per_view(self.backbone_patch)
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        self.k()?;
        let check = |cond: bool, msg: &str| if cond { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.horizon >= 1, "horizon must be positive")?;
        check(self.denoise_steps >= 1, "denoise_steps must be positive")?;
        check(self.action_tokens >= 1 && self.action_horizon >= 1, "action token counts must be positive")?;
        check(self.action_dim >= 2, "action_dim must be at least 2")?;
        for p in [self.encoder_patch, self.backbone_patch] {
            check(p > 0 && self.image_size % p == 0, "patch size must divide image size")?;
        }
        for s in [&self.encoder, &self.backbone, &self.world_model, &self.head] {
            check(s.layers >= 1 && s.heads >= 1 && s.width % s.heads == 0, "stack width must divide by heads")?;
            check(s.width % 2 == 0, "stack width must be even")?;
        }
        Ok(())
    }
}
