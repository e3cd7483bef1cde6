//! Policy transformer. It reads the first frame of each view and the
//! instruction, and emits latent-action tokens `z` and the action
//! conditioning tokens `z_a` from learnable special-token positions.

use rand::Rng;

use crate::config::{ModelConfig, VIEWS};
use crate::error::{Error, Result};
use crate::nn::{Linear, Stack};
use crate::numerics::{AttnMask, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::target_encoder::patchify;

/// Token input for one forward pass. Only the first frame of each view is
/// held here; there is no slot for later frames.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSequence {
    /// `[V · N_p, patch_dim]` raw pixel patches of the `t₀` frames.
    pub image_patches: Tensor,
    pub instruction: Vec<u32>,
    pub horizon: usize,
    pub k: usize,
    pub action_tokens: usize,
}

impl BackboneSequence {
    pub fn len(&self) -> usize {
        self.image_patches.rows() + self.instruction.len() + self.horizon * self.k + self.action_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_offset(&self) -> usize {
        self.image_patches.rows() + self.instruction.len()
    }

    pub fn action_offset(&self) -> usize {
        self.latent_offset() + self.horizon * self.k
    }
}

pub fn build_sequence(frames_t0: &[&[f32]], instruction: &[u32], cfg: &ModelConfig) -> Result<BackboneSequence> {
    let k = cfg.k()?;
    if frames_t0.len() != VIEWS {
        return Err(Error::Invalid(format!("expected {VIEWS} views, got {}", frames_t0.len())));
    }
    if instruction.len() > cfg.max_instruction {
        return Err(Error::Invalid(format!(
            "instruction has {} tokens, limit is {}",
            instruction.len(),
            cfg.max_instruction
        )));
    }
    if let Some(&t) = instruction.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
        return Err(Error::Invalid(format!("token id {t} outside vocabulary")));
    }
    let patches = frames_t0
        .iter()
        .map(|f| patchify(f, cfg.image_size, cfg.backbone_patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(BackboneSequence {
        image_patches: Tensor::concat_rows(&patches.iter().collect::<Vec<_>>())?,
        instruction: instruction.to_vec(),
        horizon: cfg.horizon,
        k,
        action_tokens: cfg.action_tokens,
    })
}

pub struct BackboneOutput {
    /// `[T · K, d]`, replicas of step `i` at rows `i·K .. (i+1)·K`.
    pub z: Var,
    /// `[M, d]`
    pub z_a: Var,
    pub hidden: Var,
    /// Self-attention probabilities per layer.
    pub attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub token_embed: ParamId,
    /// One embedding per latent step `i`, shared by its K replicas.
    pub latent_embed: ParamId,
    pub action_embed: ParamId,
    pub pos: ParamId,
    pub stack: Stack,
    image_tokens: usize,
    max_instruction: usize,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.backbone.width;
        let k = cfg.k()?;
        let image_tokens = cfg.image_tokens();
        let max_len = image_tokens + cfg.max_instruction + cfg.horizon * k + cfg.action_tokens;
        let g = ParamGroup::Backbone;
        Ok(Backbone {
            patch_embed: Linear::new(store, "backbone.patch_embed", cfg.backbone_patch.pow(2) * 3, d, g, rng),
            token_embed: store.add_normal("backbone.token_embed", &[cfg.vocab_size(), d], 0.5, g, rng),
            latent_embed: store.add_normal("backbone.latent_embed", &[cfg.horizon, d], 0.5, g, rng),
            action_embed: store.add_normal("backbone.action_embed", &[1, d], 0.5, g, rng),
            pos: store.add_normal("backbone.pos", &[max_len, d], 0.1, g, rng),
            stack: Stack::new(store, "backbone", &cfg.backbone, None, g, rng),
            image_tokens,
            max_instruction: cfg.max_instruction,
        })
    }

    /// Position index of every sequence slot. The instruction segment owns a
    /// fixed number of slots so latent and action positions do not move with
    /// instruction length.
    fn positions(&self, seq: &BackboneSequence) -> Vec<usize> {
        let img = self.image_tokens;
        let special = img + self.max_instruction;
        (0..img)
            .chain(img..img + seq.instruction.len())
            .chain(special..special + seq.horizon * seq.k + seq.action_tokens)
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, seq: &BackboneSequence) -> Result<BackboneOutput> {
        if seq.image_patches.rows() != self.image_tokens {
            return Err(Error::Invalid(format!(
                "expected {} image tokens, got {}",
                self.image_tokens,
                seq.image_patches.rows()
            )));
        }
        let patches = g.input(seq.image_patches.clone())?;
        let mut parts = vec![self.patch_embed.forward(g, patches)?];
        if !seq.instruction.is_empty() {
            let ids: Vec<usize> = seq.instruction.iter().map(|&t| t as usize).collect();
            parts.push(g.embedding(self.token_embed, &ids)?);
        }
        let latent_ids: Vec<usize> = (0..seq.horizon).flat_map(|i| std::iter::repeat(i).take(seq.k)).collect();
        parts.push(g.embedding(self.latent_embed, &latent_ids)?);
        parts.push(g.embedding(self.action_embed, &vec![0; seq.action_tokens])?);
        let x = g.concat_rows(&parts)?;
        let pos = g.embedding(self.pos, &self.positions(seq))?;
        let x = g.add(x, pos)?;

        let mask = AttnMask::causal(seq.len());
        let out = self.stack.forward(g, x, Some(&mask), None)?;
        let z = g.slice_rows(out.hidden, seq.latent_offset(), seq.horizon * seq.k)?;
        let z_a = g.slice_rows(out.hidden, seq.action_offset(), seq.action_tokens)?;
        Ok(BackboneOutput {
            z,
            z_a,
            hidden: out.hidden,
            attn: out.attn,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(cfg: &ModelConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let b = Backbone::new(&mut store, cfg, &mut rng::stream(2, &[rng::purpose::INIT])).unwrap();
        (store, b)
    }

    fn frames(cfg: &ModelConfig, seed: u64) -> Vec<Vec<f32>> {
        let mut r = rng::stream(seed, &[]);
        (0..2)
            .map(|_| (0..cfg.image_size.pow(2) * 3).map(|_| r.gen_range(0.0..1.0)).collect())
            .collect()
    }

    fn seq(cfg: &ModelConfig, instr: &[u32]) -> BackboneSequence {
        let f = frames(cfg, 5);
        build_sequence(&[&f[0], &f[1]], instr, cfg).unwrap()
    }

    fn run(store: &ParamStore, b: &Backbone, s: &BackboneSequence) -> (Tensor, Tensor) {
        let mut g = Graph::new(store);
        let out = b.forward(&mut g, s).unwrap();
        (g.value(out.z).clone(), g.value(out.z_a).clone())
    }

    #[test]
    fn sequence_layout_follows_horizon() {
        let mut cfg = ModelConfig::tiny();
        cfg.horizon = 8;
        cfg.action_tokens = 32;
        let s = seq(&cfg, &[2, 3]);
        assert_eq!((s.k, s.horizon * s.k, s.action_tokens), (3, 24, 32));
        cfg.horizon = 4;
        assert_eq!(seq(&cfg, &[]).k, 6);
        cfg.horizon = 5;
        let f = frames(&cfg, 1);
        assert!(matches!(build_sequence(&[&f[0], &f[1]], &[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_with_and_without_instruction() {
        let cfg = ModelConfig::tiny();
        let (store, b) = setup(&cfg);
        let k = cfg.k().unwrap();
        for instr in [vec![], vec![2, 6, 10]] {
            let (z, z_a) = run(&store, &b, &seq(&cfg, &instr));
            assert_eq!(z.shape(), &[cfg.horizon * k, cfg.backbone.width]);
            assert_eq!(z_a.shape(), &[cfg.action_tokens, cfg.backbone.width]);
        }
    }

    #[test]
    fn action_embedding_does_not_reach_latents() {
        let cfg = ModelConfig::tiny();
        let (mut store, b) = setup(&cfg);
        let s = seq(&cfg, &[2, 3]);
        let (z0, za0) = run(&store, &b, &s);
        store.get_mut(b.action_embed).value.data_mut()[0] += 1.0;
        let (z1, za1) = run(&store, &b, &s);
        assert!(z0.bit_eq(&z1));
        assert!(!za0.bit_eq(&za1));
    }

    #[test]
    fn later_latent_embeddings_do_not_reach_earlier_steps() {
        let cfg = ModelConfig::tiny();
        let (mut store, b) = setup(&cfg);
        let s = seq(&cfg, &[2]);
        let k = s.k;
        let d = cfg.backbone.width;
        let (z0, _) = run(&store, &b, &s);
        let m = 2;
        store.get_mut(b.latent_embed).value.data_mut()[m * d] += 1.0;
        let (z1, _) = run(&store, &b, &s);
        let split = m * k * d;
        assert_eq!(&z0.data()[..split], &z1.data()[..split]);
        assert_ne!(&z0.data()[split..], &z1.data()[split..]);
    }

    #[test]
    fn replicas_share_input_but_differ_in_output() {
        let cfg = ModelConfig::tiny();
        let (store, b) = setup(&cfg);
        let (z, _) = run(&store, &b, &seq(&cfg, &[2]));
        assert_ne!(z.row(0), z.row(1));
    }

    #[test]
    fn bad_inputs_rejected() {
        let cfg = ModelConfig::tiny();
        let f = frames(&cfg, 1);
        assert!(build_sequence(&[&f[0]], &[], &cfg).is_err());
        assert!(build_sequence(&[&f[0], &f[1]], &[999], &cfg).is_err());
        assert!(build_sequence(&[&f[0], &f[1]], &[1; 20], &cfg).is_err());
    }
}
