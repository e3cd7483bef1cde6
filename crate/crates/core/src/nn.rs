//! Transformer building blocks shared by the encoder, backbone, world model
//! and action head. Blocks are pre-norm with residual connections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{AttnMask, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, fan_in, fan_out, (1.0 / fan_in as f32).sqrt(), group, rng)
    }

    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f32,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, group, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group);
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// `kv_dim` is the width of the key/value source (equal to `dim` for
    /// self-attention).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        depth_scale: f32,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, group, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, group, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, group, rng),
            out: Linear::with_std(
                store,
                &format!("{name}.out"),
                dim,
                dim,
                depth_scale * (1.0 / dim as f32).sqrt(),
                group,
                rng,
            ),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (for
    /// weight inspection).
    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, mask: Option<&AttnMask>) -> Result<(Var, Var)> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let a = g.attention(q, k, v, mask, self.heads)?;
        Ok((self.out.forward(g, a)?, a))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        depth_scale: f32,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Mlp {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, group, rng),
            down: Linear::with_std(
                store,
                &format!("{name}.down"),
                hidden,
                dim,
                depth_scale * (1.0 / hidden as f32).sqrt(),
                group,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Shape hyperparameters of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

/// Pre-norm block: self-attention, optional cross-attention, MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockOutput {
    pub hidden: Var,
    /// Self-attention probability node.
    pub attn: Var,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &StackConfig,
        cross_dim: Option<usize>,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let d = cfg.width;
        let depth_scale = 1.0 / (2.0 * cfg.layers as f32).sqrt();
        Block {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d, group),
            attn: Attention::new(store, &format!("{name}.attn"), d, d, cfg.heads, depth_scale, group, rng),
            cross: cross_dim.map(|kv| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), d, group),
                    Attention::new(store, &format!("{name}.cross"), d, kv, cfg.heads, depth_scale, group, rng),
                )
            }),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d, group),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, depth_scale, group, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mask: Option<&AttnMask>,
        context: Option<Var>,
    ) -> Result<BlockOutput> {
        let h = self.ln_attn.forward(g, x)?;
        let (a, probs) = self.attn.forward(g, h, h, mask)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some(ctx)) = (&self.cross, context) {
            let h = ln.forward(g, x)?;
            let (c, _) = cross.forward(g, h, ctx, None)?;
            x = g.add(x, c)?;
        }
        let h = self.ln_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let hidden = g.add(x, m)?;
        Ok(BlockOutput { hidden, attn: probs })
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

pub struct StackOutput {
    pub hidden: Var,
    /// Self-attention probability node per layer.
    pub attn: Vec<Var>,
}

impl Stack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &StackConfig,
        cross_dim: Option<usize>,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), cfg, cross_dim, group, rng))
            .collect();
        Stack {
            blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), cfg.width, group),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        mask: Option<&AttnMask>,
        context: Option<Var>,
    ) -> Result<StackOutput> {
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.forward(g, x, mask, context)?;
            x = out.hidden;
            attn.push(out.attn);
        }
        Ok(StackOutput {
            hidden: self.ln_out.forward(g, x)?,
            attn,
        })
    }
}

/// Sinusoidal embedding of a scalar `t ∈ [0, 1]` into `dim` channels.
pub fn sinusoidal_embedding(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half.max(1) as f32).exp();
        // scale t so the slowest frequency spans a meaningful range
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![1, dim], out).expect("embedding shape")
}
