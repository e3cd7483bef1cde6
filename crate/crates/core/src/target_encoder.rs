//! Frozen world-state encoder: per-view patch embedding plus a small
//! transformer, with both views stacked along the token axis.

use rand::Rng;

use crate::config::{ModelConfig, VIEWS};
use crate::error::{Error, Result};
use crate::nn::{Linear, Stack, StackConfig};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Splits an `size×size×3` frame into row-major `patch×patch×3` patches,
/// one patch per output row.
pub fn patchify(frame: &[f32], size: usize, patch: usize) -> Result<Tensor> {
    if frame.len() != size * size * 3 || patch == 0 || size % patch != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![frame.len()],
            rhs: vec![size, size, 3, patch],
        });
    }
    let grid = size / patch;
    let dim = patch * patch * 3;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gr in 0..grid {
        for gc in 0..grid {
            for r in 0..patch {
                let start = ((gr * patch + r) * size + gc * patch) * 3;
                out.extend_from_slice(&frame[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], out)
}

#[derive(Clone, Debug)]
pub struct TargetEncoder {
    pub image_size: usize,
    pub patch: usize,
    pub embed: Linear,
    pub pos: ParamId,
    pub stack: Stack,
}

impl TargetEncoder {
    /// Parameters are registered in the frozen group and never trained.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c: &StackConfig = &cfg.encoder;
        let n = cfg.state_tokens_per_view();
        let patch_dim = cfg.encoder_patch.pow(2) * 3;
        TargetEncoder {
            image_size: cfg.image_size,
            patch: cfg.encoder_patch,
            embed: Linear::new(store, "encoder.embed", patch_dim, c.width, ParamGroup::Frozen, rng),
            pos: store.add_normal("encoder.pos", &[n, c.width], 0.5, ParamGroup::Frozen, rng),
            stack: Stack::new(store, "encoder", c, None, ParamGroup::Frozen, rng),
        }
    }

    /// Encodes one view into `[N_v, d_v]` tokens.
    /// Encodes one frame inside an existing graph, `[N_v, d_v]`.
    pub fn forward(&self, g: &mut Graph, frame: &[f32]) -> Result<Var> {
        let patches = patchify(frame, self.image_size, self.patch)?;
        let x = g.input(patches)?;
        let x = self.embed.forward(g, x)?;
        let pos = g.param(self.pos);
        let x = g.add(x, pos)?;
        Ok(self.stack.forward(g, x, None, None)?.hidden)
    }

    pub fn encode_frame(&self, store: &ParamStore, frame: &[f32]) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, frame)?;
        Ok(g.value(out).clone())
    }

    /// World state for one step: both views' tokens stacked, `[2 N_v, d_v]`.
    pub fn encode_state(&self, store: &ParamStore, views: &[&[f32]]) -> Result<Tensor> {
        if views.len() != VIEWS {
            return Err(Error::Invalid(format!("expected {VIEWS} views, got {}", views.len())));
        }
        let encoded = views
            .iter()
            .map(|v| self.encode_frame(store, v))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&encoded.iter().collect::<Vec<_>>())
    }
}
