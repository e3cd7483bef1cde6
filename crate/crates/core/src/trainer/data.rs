//! Turns datasets into training windows with cached world-state targets.

use rayon::prelude::*;

use crate::backbone::{build_sequence, BackboneSequence};
use crate::config::{ModelConfig, VIEWS};
use crate::data_synth::{env, ActionNormalizer, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// One episode ready for training.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub id: u64,
    /// `[2, frames, H, W, 3]`
    pub frames: Tensor,
    pub instruction: Vec<u32>,
    /// Normalized actions `[ticks, A]`.
    pub actions: Option<Tensor>,
    /// Proprioceptive features before every tick.
    pub proprio: Vec<Vec<f32>>,
    /// Frozen-encoder world state of every frame, `[N_s, d_s]` each.
    pub states: Vec<Tensor>,
}

impl PreparedEpisode {
    pub fn frame(&self, view: usize, step: usize) -> &[f32] {
        let s = self.frames.shape();
        let per = s[2] * s[3] * s[4];
        let start = (view * s[1] + step) * per;
        &self.frames.data()[start..start + per]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Backbone input for a window starting at `start`: only the frames
    /// at `start` are read.
    pub fn sequence(&self, cfg: &ModelConfig, start: usize) -> Result<BackboneSequence> {
        build_sequence(&[self.frame(0, start), self.frame(1, start)], &self.instruction, cfg)
    }

    /// Stacked states for steps `from .. from + count`.
    pub fn state_block(&self, from: usize, count: usize) -> Result<Tensor> {
        Tensor::concat_rows(&self.states[from..from + count].iter().collect::<Vec<_>>())
    }
}

/// A training window: frames `start ..= start + T`, actions
/// `start .. start + H_act`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<PreparedEpisode>,
    pub action_free: Vec<PreparedEpisode>,
    pub labeled_windows: Vec<Window>,
    pub free_windows: Vec<Window>,
    pub normalizer: ActionNormalizer,
}

/// World states for every frame of an episode (views already normalized).
pub fn encode_episode_states(model: &Model, ep: &Episode) -> Result<Vec<Tensor>> {
    (0..ep.num_frames())
        .map(|t| {
            let views: Vec<&[f32]> = (0..VIEWS).map(|v| ep.frame(v, t)).collect();
            model.encoder.encode_state(&model.store, &views)
        })
        .collect()
}

/// Encodes targets and normalizes actions for one episode.
pub fn prepare_episode(model: &Model, ep: &Episode, normalizer: &ActionNormalizer) -> Result<PreparedEpisode> {
    let ep = ep.clone().normalize_views()?;
    let states = encode_episode_states(model, &ep)?;
    let cfg = &model.config;
    let (actions, proprio) = match &ep.actions {
        Some(raw) => {
            let replay = ep.replay().expect("actions present");
            (
                Some(normalizer.normalize(raw)?),
                replay.iter().map(|s| s.proprio(cfg.state_dim)).collect(),
            )
        }
        None => (None, Vec::new()),
    };
    if ep.meta.instruction.len() > cfg.max_instruction {
        return Err(Error::Invalid(format!("episode {} instruction too long", ep.meta.id)));
    }
    Ok(PreparedEpisode {
        id: ep.meta.id,
        frames: ep.frames,
        instruction: ep.meta.instruction,
        actions,
        proprio,
        states,
    })
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset, labeled: bool) -> Result<()> {
    let m = &ds.manifest;
    if m.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset image size {} does not match model image size {}",
            m.image_size, cfg.image_size
        )));
    }
    if labeled {
        if !m.has_actions {
            return Err(Error::Config("action-labeled dataset carries no actions".into()));
        }
        if m.action_dim != cfg.action_dim {
            return Err(Error::Config(format!(
                "dataset action dim {} does not match model action dim {}",
                m.action_dim, cfg.action_dim
            )));
        }
    }
    let need = cfg.horizon.max(cfg.action_horizon) + 1;
    if m.frames_per_episode < need {
        return Err(Error::Config(format!(
            "episodes have {} frames, horizon needs {need}",
            m.frames_per_episode
        )));
    }
    Ok(())
}

pub fn normalizer_for(action_dim: usize) -> Result<ActionNormalizer> {
    let (lo, hi) = env::action_bounds(action_dim);
    ActionNormalizer::new(lo, hi, Some(action_dim - 1))
}

impl TrainData {
    /// Prepares windows from a labeled dataset and an optional action-free
    /// one. Action-labeled windows start at every tick; action-free windows
    /// are cut with stride `T`.
    pub fn prepare(model: &Model, labeled: &Dataset, action_free: Option<&Dataset>) -> Result<Self> {
        let cfg = &model.config;
        check_compatible(cfg, labeled, true)?;
        if let Some(ds) = action_free {
            check_compatible(cfg, ds, false)?;
        }
        let normalizer = ActionNormalizer::new(
            labeled.manifest.action_min.clone(),
            labeled.manifest.action_max.clone(),
            Some(cfg.action_dim - 1),
        )?;
        let prep = |eps: &[Episode]| -> Result<Vec<PreparedEpisode>> {
            eps.par_iter().map(|e| prepare_episode(model, e, &normalizer)).collect()
        };
        let labeled_eps = prep(&labeled.episodes)?;
        let free_eps = match action_free {
            Some(ds) => prep(&ds.episodes)?,
            None => Vec::new(),
        };
        if let Some(e) = labeled_eps.iter().find(|e| e.actions.is_none()) {
            return Err(Error::Config(format!("labeled episode {} has no actions", e.id)));
        }

        let t = cfg.horizon;
        let h = cfg.action_horizon;
        let mut labeled_windows = Vec::new();
        for (i, e) in labeled_eps.iter().enumerate() {
            let ticks = e.actions.as_ref().map(|a| a.rows()).unwrap_or(0);
            let last = (e.num_frames() - 1 - t).min(ticks - h);
            labeled_windows.extend((0..=last).map(|start| Window { episode: i, start }));
        }
        let mut free_windows = Vec::new();
        for (i, e) in free_eps.iter().enumerate() {
            let mut start = 0;
            while start + t < e.num_frames() {
                free_windows.push(Window { episode: i, start });
                start += t;
            }
        }
        Ok(TrainData {
            labeled: labeled_eps,
            action_free: free_eps,
            labeled_windows,
            free_windows,
            normalizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_episodes, GenerateConfig, Manifest};

    fn dataset(cfg: GenerateConfig) -> Dataset {
        let episodes = generate_episodes(&cfg).unwrap();
        let (lo, hi) = env::action_bounds(cfg.action_dim);
        let manifest = Manifest {
            version: 1,
            n_records: episodes.len(),
            n_successful: 0,
            views: cfg.views,
            frames_per_episode: cfg.ticks + 1,
            image_size: cfg.image_size,
            action_dim: cfg.action_dim,
            has_actions: !cfg.action_free,
            paired: false,
            action_min: lo,
            action_max: hi,
            nuisance: cfg.nuisance,
            vocabulary: vec![],
            generator: cfg,
        };
        Dataset { manifest, episodes }
    }

    #[test]
    fn windows_and_strides() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let base = GenerateConfig {
            n_episodes: 2,
            image_size: 16,
            ticks: 12,
            ..Default::default()
        };
        let labeled = dataset(base.clone());
        let free = dataset(GenerateConfig {
            action_free: true,
            views: 1,
            seed: 99,
            ..base
        });
        let data = TrainData::prepare(&model, &labeled, Some(&free)).unwrap();
        // T = 4, H = 3: starts 0..=8 per labeled episode
        assert_eq!(data.labeled_windows.len(), 2 * 9);
        // frames 0..=12, stride 4: starts 0, 4, 8
        assert_eq!(data.free_windows.len(), 2 * 3);
        let e = &data.action_free[0];
        assert_eq!(e.frame(0, 3), e.frame(1, 3));
        let a = data.labeled[0].actions.as_ref().unwrap();
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(data.labeled[0].proprio.len(), 13);
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let ds = dataset(GenerateConfig {
            n_episodes: 1,
            image_size: 8,
            ticks: 8,
            ..Default::default()
        });
        assert!(matches!(TrainData::prepare(&model, &ds, None), Err(Error::Config(_))));
        let free = dataset(GenerateConfig {
            n_episodes: 1,
            image_size: 16,
            ticks: 8,
            action_free: true,
            ..Default::default()
        });
        assert!(TrainData::prepare(&model, &free, None).is_err());
    }
}
