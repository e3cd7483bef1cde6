//! Closed-loop evaluation in the synthetic environment.
//!
//! Each rollout re-observes and re-plans every `replan_every` ticks
//! (receding horizon). Rollouts run in parallel with per-rollout seeds and
//! are sorted by id before aggregation, so reports are reproducible.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::build_sequence;
use crate::config::VIEWS;
use crate::data_synth::env::{self, EnvState};
use crate::data_synth::{initial_state, instruction_words, render, tokenize, ActionNormalizer, NuisanceConfig, StepSeed, TaskKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor};
use crate::rng::{self, purpose};
use crate::world_model::wm_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub nuisance: NuisanceConfig,
    /// Control ticks per rollout.
    pub max_ticks: usize,
    /// Re-plan after this many executed actions; `None` uses the model's
    /// action horizon.
    pub replan_every: Option<usize>,
    /// Also evaluate each enabled nuisance factor on its own.
    pub breakdown: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_rollouts: 50,
            seed: 11,
            tasks: vec!["pick_place".into()],
            nuisance: NuisanceConfig::default(),
            max_ticks: 40,
            replan_every: None,
            breakdown: true,
        }
    }
}

/// What the harness needs from a controller.
pub trait Policy: Sync {
    fn name(&self) -> &'static str;

    /// Raw environment actions to execute from `state`, given the rendered
    /// views of the current tick. `stream` keys any randomness.
    fn act(&self, state: &EnvState, views: &[Vec<f32>], instruction: &[u32], stream: u64) -> Result<Vec<Vec<f32>>>;
}

pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub normalizer: &'a ActionNormalizer,
    pub replan_every: usize,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model, normalizer: &'a ActionNormalizer, replan_every: Option<usize>) -> Self {
        let h = model.config.action_horizon;
        ModelPolicy {
            model,
            normalizer,
            replan_every: replan_every.unwrap_or(h).clamp(1, h),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn name(&self) -> &'static str {
        "model"
    }

    fn act(&self, state: &EnvState, views: &[Vec<f32>], instruction: &[u32], stream: u64) -> Result<Vec<Vec<f32>>> {
        let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
        let seq = build_sequence(&refs, instruction, &self.model.config)?;
        let proprio = state.proprio(self.model.config.state_dim);
        let chunk = self.model.plan(&seq, &proprio, stream)?;
        let raw = self.normalizer.denormalize(&chunk)?;
        Ok((0..self.replan_every).map(|i| raw.row(i).to_vec()).collect())
    }
}

/// The scripted expert, noise-free.
pub struct ExpertPolicy {
    pub action_dim: usize,
}

impl Policy for ExpertPolicy {
    fn name(&self) -> &'static str {
        "expert"
    }

    fn act(&self, state: &EnvState, _: &[Vec<f32>], _: &[u32], stream: u64) -> Result<Vec<Vec<f32>>> {
        let mut r = rng::stream(stream, &[]);
        Ok(vec![env::expert_action(state, self.action_dim, 0.0, 0.0, &mut r)])
    }
}

/// Uniform random actions within the environment bounds.
pub struct RandomPolicy {
    pub action_dim: usize,
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn act(&self, _: &EnvState, _: &[Vec<f32>], _: &[u32], stream: u64) -> Result<Vec<Vec<f32>>> {
        let (lo, hi) = env::action_bounds(self.action_dim);
        let mut r = rng::stream(stream, &[purpose::RANDOM_POLICY]);
        let mut a: Vec<f32> = lo.iter().zip(&hi).map(|(l, h)| r.gen_range(*l..=*h)).collect();
        let g = self.action_dim - 1;
        a[g] = if a[g] >= env::GRIPPER_THRESHOLD { 1.0 } else { 0.0 };
        Ok(vec![a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub rollout: usize,
    pub task: TaskKind,
    pub success: bool,
    /// First tick at which the success criterion held.
    pub success_tick: Option<usize>,
    pub plans: usize,
    /// Mean squared error between executed and expert actions, in
    /// normalized units.
    pub action_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBreakdown {
    pub factor: String,
    pub nuisance: NuisanceConfig,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub config: EvalConfig,
    pub n_rollouts: usize,
    pub success_rate: f64,
    pub random_success_rate: f64,
    pub expert_success_rate: f64,
    pub action_mse: f64,
    /// World-model error on expert-driven windows from the rollout start
    /// states; `None` when the policy has no world model.
    pub latent_mse: Option<f64>,
    /// Filled by the action-relevance probe; `None` here.
    pub action_relevance: Option<f64>,
    pub nuisance_breakdown: Vec<NuisanceBreakdown>,
    /// Names of fields that were not computed.
    pub skipped: Vec<String>,
    pub rollouts: Vec<RolloutResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per rollout.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rollout,task,success,success_tick,plans,action_mse\n");
        for r in &self.rollouts {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.rollout,
                r.task.name(),
                r.success as u8,
                r.success_tick.map(|t| t.to_string()).unwrap_or_default(),
                r.plans,
                r.action_mse
            ));
        }
        s
    }
}

struct RolloutSetup {
    task: TaskKind,
    layout_seed: u64,
    nuisance_seed: u64,
}

fn setup(cfg: &EvalConfig, tasks: &[TaskKind], r: usize) -> RolloutSetup {
    let mut pick = rng::stream(cfg.seed, &[purpose::EVAL, r as u64, 0]);
    RolloutSetup {
        task: tasks[pick.gen_range(0..tasks.len())],
        layout_seed: rng::derive_seed(cfg.seed, &[purpose::EVAL, r as u64, 1]),
        nuisance_seed: rng::derive_seed(cfg.seed, &[purpose::EVAL, r as u64, 2]),
    }
}

fn render_views(state: &EnvState, nuisance: &NuisanceConfig, nuisance_seed: u64, tick: usize, size: usize) -> Vec<Vec<f32>> {
    let seed = StepSeed {
        episode: nuisance_seed,
        tick: tick as u32,
    };
    (0..VIEWS).map(|v| render(state, v, nuisance, seed, size).data).collect()
}

/// Runs one rollout.
pub fn rollout(
    policy: &dyn Policy,
    cfg: &EvalConfig,
    nuisance: &NuisanceConfig,
    tasks: &[TaskKind],
    r: usize,
    image_size: usize,
    normalizer: &ActionNormalizer,
) -> Result<RolloutResult> {
    let s = setup(cfg, tasks, r);
    let mut state = initial_state(s.task, s.layout_seed, s.nuisance_seed, nuisance);
    let instruction = tokenize(&instruction_words(&state))?;
    let dim = normalizer.dim();
    let mut queue: Vec<Vec<f32>> = Vec::new();
    let mut plans = 0;
    let mut success_tick = None;
    let mut sq_err = 0.0f64;
    let mut count = 0usize;
    let mut expert_rng = rng::stream(0, &[]);
    for tick in 0..=cfg.max_ticks {
        if state.is_success() {
            success_tick = Some(tick);
            break;
        }
        if tick == cfg.max_ticks {
            break;
        }
        if queue.is_empty() {
            let views = render_views(&state, nuisance, s.nuisance_seed, tick, image_size);
            let stream = rng::derive_seed(cfg.seed, &[purpose::EVAL, r as u64, 3, tick as u64]);
            queue = policy.act(&state, &views, &instruction, stream)?;
            queue.reverse();
            plans += 1;
        }
        let a = queue.pop().expect("non-empty plan");
        if a.len() != dim {
            return Err(Error::Config(format!("policy emits {}-dim actions, environment expects {dim}", a.len())));
        }
        let expert = env::expert_action(&state, dim, 0.0, 0.0, &mut expert_rng);
        let (na, ne) = (normalizer.normalize_one(&a), normalizer.normalize_one(&expert));
        sq_err += na.iter().zip(&ne).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / dim as f64;
        count += 1;
        state = env::step_env(&state, &a);
    }
    Ok(RolloutResult {
        rollout: r,
        task: s.task,
        success: success_tick.is_some(),
        success_tick,
        plans,
        action_mse: if count > 0 { sq_err / count as f64 } else { 0.0 },
    })
}

fn run_all(
    policy: &dyn Policy,
    cfg: &EvalConfig,
    nuisance: &NuisanceConfig,
    tasks: &[TaskKind],
    image_size: usize,
    normalizer: &ActionNormalizer,
) -> Result<Vec<RolloutResult>> {
    let mut out: Vec<RolloutResult> = (0..cfg.n_rollouts)
        .into_par_iter()
        .map(|r| rollout(policy, cfg, nuisance, tasks, r, image_size, normalizer))
        .collect::<Result<_>>()?;
    out.sort_by_key(|r| r.rollout);
    Ok(out)
}

fn success_rate(rs: &[RolloutResult]) -> f64 {
    if rs.is_empty() {
        return 0.0;
    }
    rs.iter().filter(|r| r.success).count() as f64 / rs.len() as f64
}

/// Success rate of `policy` over the configured rollouts.
pub fn evaluate_policy(
    policy: &dyn Policy,
    cfg: &EvalConfig,
    image_size: usize,
    normalizer: &ActionNormalizer,
) -> Result<Vec<RolloutResult>> {
    let tasks = parse_tasks(&cfg.tasks)?;
    run_all(policy, cfg, &cfg.nuisance, &tasks, image_size, normalizer)
}

fn parse_tasks(names: &[String]) -> Result<Vec<TaskKind>> {
    if names.is_empty() {
        return Err(Error::Config("task mix is empty".into()));
    }
    names.iter().map(|t| TaskKind::parse(t)).collect()
}

/// World-model error on a window driven by the noise-free expert from each
/// rollout's start state.
pub fn latent_mse(model: &Model, cfg: &EvalConfig, tasks: &[TaskKind]) -> Result<f64> {
    let mc = &model.config;
    let per: Vec<f64> = (0..cfg.n_rollouts)
        .into_par_iter()
        .map(|r| {
            let s = setup(cfg, tasks, r);
            let mut state = initial_state(s.task, s.layout_seed, s.nuisance_seed, &cfg.nuisance);
            let instruction = tokenize(&instruction_words(&state))?;
            let mut states = Vec::with_capacity(mc.horizon + 1);
            let mut first = Vec::new();
            let mut er = rng::stream(0, &[]);
            for tick in 0..=mc.horizon {
                let views = render_views(&state, &cfg.nuisance, s.nuisance_seed, tick, mc.image_size);
                let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
                states.push(model.encoder.encode_state(&model.store, &refs)?);
                if tick == 0 {
                    first = views;
                }
                let a = env::expert_action(&state, mc.action_dim, 0.0, 0.0, &mut er);
                state = env::step_env(&state, &a);
            }
            let refs: Vec<&[f32]> = first.iter().map(|v| v.as_slice()).collect();
            let seq = build_sequence(&refs, &instruction, mc)?;
            let mut g = Graph::new(&model.store);
            let out = model.backbone.forward(&mut g, &seq)?;
            let cat = |ts: &[Tensor]| Tensor::concat_rows(&ts.iter().collect::<Vec<_>>());
            let sv = g.input(cat(&states[..mc.horizon])?)?;
            let tv = g.input(cat(&states[1..])?)?;
            let pred = model.world_model.predict(&mut g, sv, out.z)?;
            let l = wm_loss(&mut g, pred, tv)?;
            Ok(g.value(l).data()[0] as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Full report for a trained model, with random and expert baselines
/// measured through the same harness.
pub fn evaluate_model(model: &Model, normalizer: &ActionNormalizer, cfg: &EvalConfig) -> Result<EvalReport> {
    let tasks = parse_tasks(&cfg.tasks)?;
    if cfg.n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be positive".into()));
    }
    cfg.nuisance.validate()?;
    if normalizer.dim() != model.config.action_dim {
        return Err(Error::Config("normalizer does not match the model action dim".into()));
    }
    let size = model.config.image_size;
    let policy = ModelPolicy::new(model, normalizer, cfg.replan_every);
    let dim = model.config.action_dim;
    let rollouts = run_all(&policy, cfg, &cfg.nuisance, &tasks, size, normalizer)?;
    let random = run_all(&RandomPolicy { action_dim: dim }, cfg, &cfg.nuisance, &tasks, size, normalizer)?;
    let expert = run_all(&ExpertPolicy { action_dim: dim }, cfg, &cfg.nuisance, &tasks, size, normalizer)?;
    let mut breakdown = Vec::new();
    let mut skipped = vec!["action_relevance".to_string()];
    if cfg.breakdown {
        for (name, n) in cfg.nuisance.factors() {
            let rs = run_all(&policy, cfg, &n, &tasks, size, normalizer)?;
            breakdown.push(NuisanceBreakdown {
                factor: name.to_string(),
                nuisance: n,
                success_rate: success_rate(&rs),
            });
        }
    } else {
        skipped.push("nuisance_breakdown".to_string());
    }
    Ok(EvalReport {
        policy: policy.name().to_string(),
        config: cfg.clone(),
        n_rollouts: cfg.n_rollouts,
        success_rate: success_rate(&rollouts),
        random_success_rate: success_rate(&random),
        expert_success_rate: success_rate(&expert),
        action_mse: rollouts.iter().map(|r| r.action_mse).sum::<f64>() / rollouts.len() as f64,
        latent_mse: Some(latent_mse(model, cfg, &tasks)?),
        action_relevance: None,
        nuisance_breakdown: breakdown,
        skipped,
        rollouts,
    })
}
