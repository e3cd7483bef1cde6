//! Procedural multi-view manipulation episodes with ground-truth actions and
//! independently dialable nuisance factors.

pub mod dataset;
pub mod env;
mod generate;
pub mod preprocess;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use dataset::{read_dataset, write_dataset, Dataset, Manifest};
pub use env::{step_env, EnvState};
pub use generate::{generate_dataset, generate_episode, generate_episodes, initial_state, sample_layout, GenerateConfig, PairRole};
pub use preprocess::{normalize_views, ActionNormalizer};
pub use render::{render, Frame, StepSeed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub camera_jitter_px: u32,
    pub background_flicker_amp: f32,
    pub distractor_count: u32,
    pub lighting_drift_amp: f32,
}

impl NuisanceConfig {
    pub fn none() -> Self {
        NuisanceConfig {
            camera_jitter_px: 0,
            background_flicker_amp: 0.0,
            distractor_count: 0,
            lighting_drift_amp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.background_flicker_amp) || !unit.contains(&self.lighting_drift_amp) {
            return Err(Error::Config("nuisance amplitudes must lie in [0, 1]".into()));
        }
        if self.distractor_count > 8 {
            return Err(Error::Config("at most 8 distractors fit in the scene".into()));
        }
        if self.camera_jitter_px > 8 {
            return Err(Error::Config("camera jitter above 8 px is not supported".into()));
        }
        Ok(())
    }

    /// Copies of this config with exactly one factor left enabled, for
    /// per-factor evaluation breakdowns. Disabled factors are skipped.
    pub fn factors(&self) -> Vec<(&'static str, NuisanceConfig)> {
        let none = NuisanceConfig::none();
        let mut out = vec![("clean", none)];
        if self.camera_jitter_px > 0 {
            out.push(("camera_jitter", NuisanceConfig { camera_jitter_px: self.camera_jitter_px, ..none }));
        }
        if self.background_flicker_amp > 0.0 {
            out.push(("background_flicker", NuisanceConfig { background_flicker_amp: self.background_flicker_amp, ..none }));
        }
        if self.distractor_count > 0 {
            out.push(("distractors", NuisanceConfig { distractor_count: self.distractor_count, ..none }));
        }
        if self.lighting_drift_amp > 0.0 {
            out.push(("lighting_drift", NuisanceConfig { lighting_drift_amp: self.lighting_drift_amp, ..none }));
        }
        out
    }
}

impl Default for NuisanceConfig {
    /// Mild nuisance used by the default datasets.
    fn default() -> Self {
        NuisanceConfig {
            camera_jitter_px: 1,
            background_flicker_amp: 0.15,
            distractor_count: 1,
            lighting_drift_amp: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One object, one pad.
    PickPlace,
    /// Two objects and two pads; the instruction names the pair to use.
    PickPlaceChoice,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pick_place" => Ok(TaskKind::PickPlace),
            "pick_place_choice" => Ok(TaskKind::PickPlaceChoice),
            other => Err(Error::Invalid(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick_place",
            TaskKind::PickPlaceChoice => "pick_place_choice",
        }
    }
}

/// Fixed 64-token instruction vocabulary.
pub const VOCAB_SIZE: usize = 64;

pub fn vocabulary() -> Vec<String> {
    let mut words: Vec<String> = ["<pad>", "<bos>", "move", "to", "the", "pad"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(env::Color::ALL.iter().map(|c| c.word().to_string()));
    words.extend(env::Shape::ALL.iter().map(|s| s.word().to_string()));
    words.extend(env::PadColor::ALL.iter().map(|p| p.word().to_string()));
    let used = words.len();
    words.extend((used..VOCAB_SIZE).map(|i| format!("<unused{i}>")));
    words
}

pub fn token_id(word: &str) -> Result<u32> {
    vocabulary()
        .iter()
        .position(|w| w == word)
        .map(|i| i as u32)
        .ok_or_else(|| Error::Invalid(format!("word {word:?} not in vocabulary")))
}

/// "move <color> <shape> to <pad color> pad"
pub fn instruction_words(state: &EnvState) -> Vec<String> {
    let obj = &state.objects[state.target_object];
    let pad = &state.pads[state.target_pad];
    ["move", obj.color.word(), obj.shape.word(), "to", pad.color.word(), "pad"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn tokenize(words: &[String]) -> Result<Vec<u32>> {
    words.iter().map(|w| token_id(w)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub group: u64,
    pub role: PairRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: u64,
    pub layout_seed: u64,
    pub nuisance_seed: u64,
    pub task: TaskKind,
    pub instruction_words: Vec<String>,
    pub instruction: Vec<u32>,
    pub nuisance: NuisanceConfig,
    pub initial_state: EnvState,
    pub final_object_positions: Vec<[f32; 2]>,
    pub success: bool,
    pub success_tick: Option<u32>,
    /// `[V, ticks + 1, H, W, 3]`
    pub frames_shape: Vec<usize>,
    /// `[ticks, A]` when the episode carries action labels.
    pub actions_shape: Option<Vec<usize>>,
    pub pair: Option<PairInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    /// `[V, ticks + 1, H, W, 3]`, values in `[0, 1]`.
    pub frames: Tensor,
    /// Raw environment-unit actions, `[ticks, A]`.
    pub actions: Option<Tensor>,
}

impl Episode {
    pub fn views(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.frames.shape()[2]
    }

    /// One `H×W×3` frame.
    pub fn frame(&self, view: usize, step: usize) -> &[f32] {
        let s = self.frames.shape();
        let per = s[2] * s[3] * s[4];
        let start = (view * s[1] + step) * per;
        &self.frames.data()[start..start + per]
    }

    /// Drops the action labels (action-free stream).
    pub fn without_actions(mut self) -> Self {
        self.actions = None;
        self.meta.actions_shape = None;
        self
    }

    pub fn normalize_views(mut self) -> Result<Self> {
        self.frames = normalize_views(&self.frames)?;
        self.meta.frames_shape = self.frames.shape().to_vec();
        Ok(self)
    }

    /// Replays stored actions from the stored initial state, returning the
    /// state before every tick plus the final state (`ticks + 1` entries).
    pub fn replay(&self) -> Option<Vec<EnvState>> {
        let actions = self.actions.as_ref()?;
        let mut states = Vec::with_capacity(actions.rows() + 1);
        let mut s = self.meta.initial_state.clone();
        states.push(s.clone());
        for t in 0..actions.rows() {
            s = step_env(&s, actions.row(t));
            states.push(s.clone());
        }
        Some(states)
    }
}
