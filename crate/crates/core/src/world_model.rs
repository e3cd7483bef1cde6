//! Latent world model: predicts next-step world states from past states and
//! latent actions under a block-causal mask, trained teacher-forced.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, Stack};
use crate::numerics::{AttnMask, Graph, ParamGroup, ParamId, ParamStore, Var};

/// Block `i` holds `[K latent tokens; N_s state tokens]` of step `i`. A
/// token may attend to every token in its own block and in earlier blocks.
pub fn build_mask(t: usize, k: usize, n_s: usize) -> AttnMask {
    let block = k + n_s;
    let n = t * block;
    AttnMask::from_fn(n, n, |p, q| q / block <= p / block)
}

/// Row indices of the state tokens of every block, in step order.
pub fn state_rows(t: usize, k: usize, n_s: usize) -> Vec<usize> {
    (0..t).flat_map(|i| (0..n_s).map(move |j| i * (k + n_s) + k + j)).collect()
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub latent_proj: Linear,
    pub state_proj: Linear,
    pub pos: ParamId,
    pub stack: Stack,
    pub head: Linear,
    pub horizon: usize,
    pub k: usize,
    pub state_tokens: usize,
}

impl WorldModel {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = cfg.world_model.width;
        let k = cfg.k()?;
        let n_s = cfg.state_tokens();
        let g = ParamGroup::Backbone;
        Ok(WorldModel {
            latent_proj: Linear::new(store, "wm.latent_proj", cfg.backbone.width, w, g, rng),
            state_proj: Linear::new(store, "wm.state_proj", cfg.state_width(), w, g, rng),
            pos: store.add_normal("wm.pos", &[cfg.horizon * (k + n_s), w], 0.1, g, rng),
            stack: Stack::new(store, "wm", &cfg.world_model, None, g, rng),
            head: Linear::new(store, "wm.head", w, cfg.state_width(), g, rng),
            horizon: cfg.horizon,
            k,
            state_tokens: n_s,
        })
    }

    /// `states` is `[T · N_s, d_s]` (steps `t₀ … t_{T−1}`), `z` is
    /// `[T · K, d_model]`. Returns `[T · N_s, d_s]` where block `i` of the
    /// output predicts the state at step `i + 1`.
    pub fn predict(&self, g: &mut Graph, states: Var, z: Var) -> Result<Var> {
        self.predict_with_mask(g, states, z, &build_mask(self.horizon, self.k, self.state_tokens))
    }

    /// As [`predict`](Self::predict) with a caller-supplied mask, so probes
    /// can check that a corrupted mask is detected.
    pub fn predict_with_mask(&self, g: &mut Graph, states: Var, z: Var, mask: &AttnMask) -> Result<Var> {
        let (t, k, n_s) = (self.horizon, self.k, self.state_tokens);
        let (zr, sr) = (g.value(z).rows(), g.value(states).rows());
        if zr != t * k || sr != t * n_s {
            return Err(Error::Invalid(format!(
                "step count mismatch: {} latent rows and {} state rows for T={t}, K={k}, N_s={n_s}",
                zr, sr
            )));
        }
        let zp = self.latent_proj.forward(g, z)?;
        let sp = self.state_proj.forward(g, states)?;
        let mut parts = Vec::with_capacity(2 * t);
        for i in 0..t {
            parts.push(g.slice_rows(zp, i * k, k)?);
            parts.push(g.slice_rows(sp, i * n_s, n_s)?);
        }
        let x = g.concat_rows(&parts)?;
        let pos = g.param(self.pos);
        let x = g.add(x, pos)?;
        let out = self.stack.forward(g, x, Some(mask), None)?;
        let s_out = g.gather_rows(out.hidden, &state_rows(t, k, n_s))?;
        self.head.forward(g, s_out)
    }
}

/// Mean squared error over all predicted tokens, steps and channels.
pub fn wm_loss(g: &mut Graph, pred: Var, targets: Var) -> Result<Var> {
    g.mse(pred, targets)
}
