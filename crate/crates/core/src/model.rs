//! The full model: frozen target encoder, backbone, world model and action
//! head sharing one parameter store.

use crate::action_head::ActionHead;
use crate::backbone::{build_sequence, Backbone, BackboneOutput, BackboneSequence};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Graph, ParamGroup, ParamStore, Tensor};
use crate::rng::{self, purpose};
use crate::target_encoder::TargetEncoder;
use crate::world_model::WorldModel;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: TargetEncoder,
    pub backbone: Backbone,
    pub world_model: WorldModel,
    pub head: ActionHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        // separate streams so changing one module's shape leaves the others'
        // initialization untouched
        let encoder = TargetEncoder::new(&mut store, &config, &mut rng::stream(seed, &[purpose::INIT, 0]));
        let backbone = Backbone::new(&mut store, &config, &mut rng::stream(seed, &[purpose::INIT, 1]))?;
        let world_model = WorldModel::new(&mut store, &config, &mut rng::stream(seed, &[purpose::INIT, 2]))?;
        let head = ActionHead::new(&mut store, &config, &mut rng::stream(seed, &[purpose::INIT, 3]));
        Ok(Model {
            config,
            store,
            encoder,
            backbone,
            world_model,
            head,
        })
    }

    pub fn sequence(&self, frames_t0: &[&[f32]], instruction: &[u32]) -> Result<BackboneSequence> {
        build_sequence(frames_t0, instruction, &self.config)
    }

    /// Backbone outputs as plain tensors `(z, z_a)`.
    pub fn encode(&self, seq: &BackboneSequence) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.store);
        let BackboneOutput { z, z_a, .. } = self.backbone.forward(&mut g, seq)?;
        Ok((g.value(z).clone(), g.value(z_a).clone()))
    }

    /// Plans one normalized action chunk `[H, A]`.
    pub fn plan(&self, seq: &BackboneSequence, state: &[f32], seed: u64) -> Result<Tensor> {
        let (_, z_a) = self.encode(seq)?;
        let state = Tensor::new(vec![1, state.len()], state.to_vec())?;
        self.head.generate(&self.store, &z_a, &state, self.config.denoise_steps, seed)
    }

    /// Snapshot of the frozen encoder parameters.
    pub fn frozen_values(&self) -> Vec<Tensor> {
        self.store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Frozen)
            .map(|(_, p)| p.value.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig::tiny(), 3).unwrap();
        let b = Model::new(ModelConfig::tiny(), 3).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert!(p.value.bit_eq(&q.value));
        }
        let c = Model::new(ModelConfig::tiny(), 4).unwrap();
        assert!(a.store.iter().zip(c.store.iter()).any(|((_, p), (_, q))| !p.value.bit_eq(&q.value)));
    }

    #[test]
    fn groups_cover_modules() {
        let m = Model::new(ModelConfig::tiny(), 1).unwrap();
        let count = |g: ParamGroup| m.store.iter().filter(|(_, p)| p.group == g).count();
        assert!(count(ParamGroup::Frozen) > 0 && count(ParamGroup::Backbone) > 0 && count(ParamGroup::ActionHead) > 0);
        for (_, p) in m.store.iter() {
            assert_eq!(p.trainable, p.group != ParamGroup::Frozen, "{}", p.name);
        }
    }
}
