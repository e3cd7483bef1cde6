use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{self, Color, EnvState, Pad, PadColor, SceneObject, Shape};
use super::render::{render, StepSeed};
use super::{instruction_words, tokenize, write_dataset, Episode, EpisodeMeta, NuisanceConfig, PairInfo, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_episodes: usize,
    pub tasks: Vec<String>,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
    pub image_size: usize,
    /// Control ticks per episode; frames per view are `ticks + 1`.
    pub ticks: usize,
    pub action_dim: usize,
    /// Number of rendered views (1 or 2).
    pub views: usize,
    /// Emit (base, same-action twin, different-action twin) triples.
    pub paired: bool,
    /// Store no action labels (stand-in for human video).
    pub action_free: bool,
    pub expert_noise_std: f32,
    pub expert_noise_bound: f32,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_episodes: 100,
            tasks: vec!["pick_place".into()],
            nuisance: NuisanceConfig::default(),
            seed: 7,
            image_size: 64,
            ticks: 40,
            action_dim: 3,
            views: 2,
            paired: false,
            action_free: false,
            expert_noise_std: 0.006,
            expert_noise_bound: 0.012,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<Vec<TaskKind>> {
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("task mix is empty".into()));
        }
        if !(self.action_dim == 3 || self.action_dim == 7) {
            return Err(Error::Config("action_dim must be 3 or 7".into()));
        }
        if !(1..=2).contains(&self.views) {
            return Err(Error::Config("views must be 1 or 2".into()));
        }
        if self.image_size < 8 || self.ticks == 0 {
            return Err(Error::Config("image_size >= 8 and ticks >= 1 required".into()));
        }
        self.nuisance.validate()?;
        self.tasks.iter().map(|t| TaskKind::parse(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    Base,
    /// Same layout and actions, different nuisance draw.
    SameAction,
    /// Different layout (hence actions), same nuisance draw.
    DiffAction,
}

fn far(p: [f32; 2], others: &[[f32; 2]], min_dist: f32) -> bool {
    others
        .iter()
        .all(|o| ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)).sqrt() >= min_dist)
}

fn sample_point<R: Rng>(rng: &mut R, lo: f32, hi: f32, avoid: &[[f32; 2]], min_dist: f32) -> [f32; 2] {
    for _ in 0..1000 {
        let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        if far(p, avoid, min_dist) {
            return p;
        }
    }
    // unreachable for the densities used here
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Samples the task-relevant part of a scene from `layout_seed`.
pub fn sample_layout(task: TaskKind, layout_seed: u64) -> EnvState {
    let mut r = rng::stream(layout_seed, &[purpose::LAYOUT]);
    let n = match task {
        TaskKind::PickPlace => 1,
        TaskKind::PickPlaceChoice => 2,
    };
    let mut combos: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    combos.shuffle(&mut r);
    let mut pad_colors = PadColor::ALL.to_vec();
    pad_colors.shuffle(&mut r);

    let mut taken = Vec::new();
    let mut pads = Vec::new();
    for pc in pad_colors.iter().take(n) {
        let p = sample_point(&mut r, 0.15, 0.85, &taken, 0.3);
        taken.push(p);
        pads.push(Pad { pos: p, color: *pc });
    }
    let mut objects = Vec::new();
    for &(color, shape) in combos.iter().take(n) {
        let p = sample_point(&mut r, 0.12, 0.88, &taken, 0.25);
        taken.push(p);
        objects.push(SceneObject { pos: p, color, shape });
    }
    let gripper = [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)];
    let target_object = r.gen_range(0..n);
    let target_pad = r.gen_range(0..n);
    EnvState {
        gripper,
        gripper_closed: false,
        holding: None,
        objects,
        target_object,
        pads,
        target_pad,
        distractors: Vec::new(),
    }
}

/// Places `count` visual distractors away from the target object, drawn
/// from the nuisance stream.
fn spawn_distractors(state: &mut EnvState, count: u32, nuisance_seed: u64) {
    let mut r = rng::stream(nuisance_seed, &[purpose::NUISANCE, 0]);
    let target = &state.objects[state.target_object];
    let (tc, ts) = (target.color, target.shape);
    let mut avoid: Vec<[f32; 2]> = state.objects.iter().map(|o| o.pos).collect();
    for _ in 0..count {
        let pos = sample_point(&mut r, 0.08, 0.92, &avoid, 0.17);
        avoid.push(pos);
        let (color, shape) = loop {
            let c = Color::ALL[r.gen_range(0..Color::ALL.len())];
            let s = Shape::ALL[r.gen_range(0..Shape::ALL.len())];
            if (c, s) != (tc, ts) {
                break (c, s);
            }
        };
        state.distractors.push(SceneObject { pos, color, shape });
    }
}

/// Full starting scene: task layout plus nuisance distractors.
pub fn initial_state(task: TaskKind, layout_seed: u64, nuisance_seed: u64, nuisance: &NuisanceConfig) -> EnvState {
    let mut state = sample_layout(task, layout_seed);
    spawn_distractors(&mut state, nuisance.distractor_count, nuisance_seed);
    state
}

/// Rolls out the scripted expert and renders every tick.
pub fn generate_episode(
    cfg: &GenerateConfig,
    id: u64,
    task: TaskKind,
    layout_seed: u64,
    nuisance_seed: u64,
    pair: Option<PairInfo>,
) -> Result<Episode> {
    let mut state = initial_state(task, layout_seed, nuisance_seed, &cfg.nuisance);
    let initial_state = state.clone();
    let words = instruction_words(&state);
    let instruction = tokenize(&words)?;

    let size = cfg.image_size;
    let per_frame = size * size * 3;
    let steps = cfg.ticks + 1;
    let mut frames = vec![0.0f32; cfg.views * steps * per_frame];
    let mut actions = Vec::with_capacity(cfg.ticks * cfg.action_dim);
    let mut expert_rng = rng::stream(layout_seed, &[purpose::EXPERT_NOISE]);
    let mut success_tick = None;

    for t in 0..steps {
        let seed = StepSeed {
            episode: nuisance_seed,
            tick: t as u32,
        };
        for v in 0..cfg.views {
            let f = render(&state, v, &cfg.nuisance, seed, size);
            let start = (v * steps + t) * per_frame;
            frames[start..start + per_frame].copy_from_slice(&f.data);
        }
        if success_tick.is_none() && state.is_success() {
            success_tick = Some(t as u32);
        }
        if t < cfg.ticks {
            let a = env::expert_action(&state, cfg.action_dim, cfg.expert_noise_std, cfg.expert_noise_bound, &mut expert_rng);
            state = env::step_env(&state, &a);
            actions.extend_from_slice(&a);
        }
    }

    let frames = Tensor::new(vec![cfg.views, steps, size, size, 3], frames)?;
    let actions = Tensor::new(vec![cfg.ticks, cfg.action_dim], actions)?;
    let meta = EpisodeMeta {
        id,
        layout_seed,
        nuisance_seed,
        task,
        instruction_words: words,
        instruction,
        nuisance: cfg.nuisance,
        initial_state,
        final_object_positions: state.objects.iter().map(|o| o.pos).collect(),
        success: success_tick.is_some(),
        success_tick,
        frames_shape: frames.shape().to_vec(),
        actions_shape: Some(actions.shape().to_vec()),
        pair,
    };
    let ep = Episode {
        meta,
        frames,
        actions: Some(actions),
    };
    Ok(if cfg.action_free { ep.without_actions() } else { ep })
}

struct Plan {
    id: u64,
    task: TaskKind,
    layout_seed: u64,
    nuisance_seed: u64,
    pair: Option<PairInfo>,
}

fn plan(cfg: &GenerateConfig, tasks: &[TaskKind]) -> Vec<Plan> {
    let seed = cfg.seed;
    let task_of = |i: u64| {
        let mut r = rng::stream(seed, &[purpose::LAYOUT, i, 1]);
        tasks[r.gen_range(0..tasks.len())]
    };
    let layout = |i: u64, alt: u64| rng::derive_seed(seed, &[purpose::LAYOUT, i, alt]);
    let nuis = |i: u64, alt: u64| rng::derive_seed(seed, &[purpose::NUISANCE, i, alt]);
    let mut out = Vec::new();
    for i in 0..cfg.n_episodes as u64 {
        let task = task_of(i);
        if cfg.paired {
            let roles = [
                (PairRole::Base, layout(i, 0), nuis(i, 0)),
                (PairRole::SameAction, layout(i, 0), nuis(i, 1)),
                (PairRole::DiffAction, layout(i, 1), nuis(i, 0)),
            ];
            for (role, l, n) in roles {
                out.push(Plan {
                    id: out.len() as u64,
                    task,
                    layout_seed: l,
                    nuisance_seed: n,
                    pair: Some(PairInfo { group: i, role }),
                });
            }
        } else {
            out.push(Plan {
                id: i,
                task,
                layout_seed: layout(i, 0),
                nuisance_seed: nuis(i, 0),
                pair: None,
            });
        }
    }
    out
}

/// Generates all episodes in memory (sharded across threads; each episode
/// depends only on its own seeds).
pub fn generate_episodes(cfg: &GenerateConfig) -> Result<Vec<Episode>> {
    let tasks = cfg.validate()?;
    plan(cfg, &tasks)
        .par_iter()
        .map(|p| generate_episode(cfg, p.id, p.task, p.layout_seed, p.nuisance_seed, p.pair.clone()))
        .collect()
}

/// Generates episodes and writes them to `out_dir`.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<()> {
    let episodes = generate_episodes(cfg)?;
    write_dataset(out_dir, cfg, &episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GenerateConfig {
        GenerateConfig {
            n_episodes: n,
            image_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_task_rejected() {
        let cfg = GenerateConfig {
            tasks: vec!["juggle".into()],
            ..small(1)
        };
        assert!(generate_episodes(&cfg).is_err());
    }

    #[test]
    fn expert_succeeds_on_almost_every_episode() {
        let cfg = GenerateConfig {
            n_episodes: 100,
            image_size: 8,
            tasks: vec!["pick_place".into(), "pick_place_choice".into()],
            ..Default::default()
        };
        let eps = generate_episodes(&cfg).unwrap();
        let ok = eps.iter().filter(|e| e.meta.success).count();
        assert!(ok >= 95, "expert success {ok}/100");
    }

    #[test]
    fn replay_reproduces_final_positions() {
        for ep in generate_episodes(&small(5)).unwrap() {
            let states = ep.replay().unwrap();
            let last = states.last().unwrap();
            for (o, p) in last.objects.iter().zip(&ep.meta.final_object_positions) {
                assert!((o.pos[0] - p[0]).abs() <= 1e-6 && (o.pos[1] - p[1]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn paired_twins_share_or_differ_as_declared() {
        let cfg = GenerateConfig {
            paired: true,
            ..small(3)
        };
        let eps = generate_episodes(&cfg).unwrap();
        assert_eq!(eps.len(), 9);
        for g in eps.chunks(3) {
            let (base, same, diff) = (&g[0], &g[1], &g[2]);
            assert_eq!(same.meta.pair.as_ref().unwrap().role, PairRole::SameAction);
            assert_eq!(base.actions, same.actions);
            assert_eq!(base.meta.layout_seed, same.meta.layout_seed);
            assert_ne!(base.meta.nuisance_seed, same.meta.nuisance_seed);
            assert_ne!(base.frames, same.frames);
            assert_eq!(base.meta.nuisance_seed, diff.meta.nuisance_seed);
            assert_ne!(base.meta.layout_seed, diff.meta.layout_seed);
            assert_ne!(base.actions, diff.actions);
        }
    }

    #[test]
    fn distractors_avoid_target_object() {
        let cfg = GenerateConfig {
            nuisance: NuisanceConfig {
                distractor_count: 3,
                ..NuisanceConfig::none()
            },
            ..small(10)
        };
        for ep in generate_episodes(&cfg).unwrap() {
            let s = &ep.meta.initial_state;
            assert_eq!(s.distractors.len(), 3);
            let t = s.target_pos();
            for d in &s.distractors {
                let dist = ((d.pos[0] - t[0]).powi(2) + (d.pos[1] - t[1]).powi(2)).sqrt();
                assert!(dist >= 2.0 * env::OBJECT_RADIUS);
            }
        }
    }
}
