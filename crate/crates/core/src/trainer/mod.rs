//! Joint training: world-model loss alone on action-free batches,
//! flow-matching plus weighted world-model loss on action-labeled batches.

mod checkpoint;
mod config;
mod data;
pub mod optim;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use data::{encode_episode_states, normalizer_for, prepare_episode, PreparedEpisode, TrainData, Window};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::lr_at;

use crate::action_head::{fm_loss, FlowSample};
use crate::data_synth::ActionNormalizer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Gradients, Graph, ParamGroup, Tensor};
use crate::rng::{self, purpose};
use crate::world_model::wm_loss;

pub const METRICS_HEADER: &str = "step,loss_total,loss_wm,loss_fm,lr_group0,lr_group1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ActionFree,
    ActionLabeled,
}

/// One row of the metrics log. `loss_fm` is 0 on action-free steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_wm: f64,
    pub loss_fm: f64,
    pub lr_group0: f64,
    pub lr_group1: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_wm, self.loss_fm, self.lr_group0, self.lr_group1
        )
    }

    pub fn parse_csv(text: &str) -> Result<Vec<StepMetrics>> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Invalid("metrics log has an unexpected header".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Invalid(format!("malformed metrics row {l:?}"));
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
                Ok(StepMetrics {
                    step: f[0].parse().map_err(|_| bad())?,
                    loss_total: num(1)?,
                    loss_wm: num(2)?,
                    loss_fm: num(3)?,
                    lr_group0: num(4)?,
                    lr_group1: num(5)?,
                })
            })
            .collect()
    }
}

/// Gradient norms observed in one step, before clipping.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradNorms {
    pub backbone: f64,
    pub head: f64,
    pub frozen: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub metrics: StepMetrics,
    pub mode: Mode,
    pub grad_norms: GradNorms,
}

/// A window plus the seed of its flow-matching draw.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub episode: &'a PreparedEpisode,
    pub start: usize,
    pub flow_seed: u64,
}

/// Per-sample losses and gradients.
pub struct SampleResult {
    pub grads: Gradients,
    pub loss_wm: f64,
    pub loss_fm: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where to write `metrics.csv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<usize>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub normalizer: ActionNormalizer,
    /// Completed optimizer steps.
    pub step: usize,
    /// Metrics of every completed step, including steps restored from a
    /// checkpoint.
    pub history: Vec<StepMetrics>,
    /// Per-step diagnostics for steps run by this process.
    pub records: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(&model.store, config.optimizer);
        Ok(Trainer {
            normalizer: normalizer_for(config.model.action_dim)?,
            config,
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn lrs(&self, step: usize) -> (f32, f32) {
        let c = &self.config;
        (
            lr_at(step, c.lr_backbone, c.warmup_steps, c.total_steps),
            lr_at(step, c.lr_head, c.warmup_steps, c.total_steps),
        )
    }

    /// Forward and backward pass for one window.
    pub fn sample_loss(&self, s: &Sample, mode: Mode) -> Result<SampleResult> {
        let model = &self.model;
        let cfg = &model.config;
        let t = cfg.horizon;
        let ep = s.episode;
        if s.start + t >= ep.num_frames() {
            return Err(Error::Invalid(format!("window at {} exceeds episode {}", s.start, ep.id)));
        }
        let seq = ep.sequence(cfg, s.start)?;
        let mut g = Graph::new(&model.store);
        let out = model.backbone.forward(&mut g, &seq)?;
        let states = g.input(ep.state_block(s.start, t)?)?;
        let targets = g.input(ep.state_block(s.start + 1, t)?)?;
        let pred = model.world_model.predict(&mut g, states, out.z)?;
        let lwm = wm_loss(&mut g, pred, targets)?;
        let (total, lfm) = match mode {
            Mode::ActionFree => (lwm, None),
            Mode::ActionLabeled => {
                let actions = ep
                    .actions
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("action-labeled batch: episode {} has no actions", ep.id)))?;
                let (h, a) = (cfg.action_horizon, cfg.action_dim);
                if s.start + h > actions.rows() {
                    return Err(Error::Invalid(format!("action window at {} exceeds episode {}", s.start, ep.id)));
                }
                let chunk = Tensor::new(vec![h, a], actions.data()[s.start * a..(s.start + h) * a].to_vec())?;
                let state = g.input(Tensor::new(vec![1, cfg.state_dim], ep.proprio[s.start].clone())?)?;
                let n = self.config.flow_samples;
                let mut lfm = None;
                for j in 0..n {
                    let flow = FlowSample::draw(chunk.clone(), &mut rng::stream(s.flow_seed, &[j as u64]));
                    let a_t = g.input(flow.a_t()?)?;
                    let target = g.input(flow.target_velocity())?;
                    let v = model.head.velocity(&mut g, a_t, flow.t, out.z_a, state)?;
                    let l = fm_loss(&mut g, v, target)?;
                    lfm = Some(match lfm {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
                let lfm = g.scale(lfm.expect("at least one flow sample"), 1.0 / n as f32)?;
                let weighted = g.scale(lwm, self.config.beta)?;
                (g.add(lfm, weighted)?, Some(lfm))
            }
        };
        let scalar = |g: &Graph, v| g.value(v).data()[0] as f64;
        let loss_wm = scalar(&g, lwm);
        let loss_fm = lfm.map(|v| scalar(&g, v)).unwrap_or(0.0);
        let loss_total = scalar(&g, total);
        let grads = g.backward(total)?;
        Ok(SampleResult {
            grads,
            loss_wm,
            loss_fm,
            loss_total,
        })
    }

    /// One optimizer step on `batch`. Gradients are averaged over the batch,
    /// clipped, applied, then cleared.
    pub fn train_step(&mut self, batch: &[Sample], mode: Mode) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let results: Vec<SampleResult> = batch
            .par_iter()
            .map(|s| self.sample_loss(s, mode))
            .collect::<Result<_>>()?;

        let (lr0, lr1) = self.lrs(self.step);
        let inv = 1.0 / batch.len() as f32;
        let mut frozen_sq = 0.0;
        let store = &mut self.model.store;
        for mut r in results.iter().map(|r| r.grads.clone()) {
            for (id, gt) in r.params() {
                if store.get(id).group == ParamGroup::Frozen {
                    frozen_sq += gt.sq_norm();
                }
            }
            r.scale(inv);
            store.accumulate(&r);
        }
        let grad_norms = GradNorms {
            backbone: store.grad_sq_norm(|p| p.group == ParamGroup::Backbone).sqrt(),
            head: store.grad_sq_norm(|p| p.group == ParamGroup::ActionHead).sqrt(),
            frozen: (frozen_sq + store.grad_sq_norm(|p| p.group == ParamGroup::Frozen)).sqrt(),
        };
        let norm = (grad_norms.backbone.powi(2) + grad_norms.head.powi(2)).sqrt();
        let clip = self.config.grad_clip as f64;
        if clip > 0.0 && norm > clip {
            let s = (clip / norm) as f32;
            for (_, p) in store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        self.optimizer.step(store, |g| match g {
            ParamGroup::ActionHead => lr1,
            _ => lr0,
        })?;
        store.zero_grad();
        self.step += 1;

        let n = results.len() as f64;
        let loss_wm = results.iter().map(|r| r.loss_wm).sum::<f64>() / n;
        let loss_fm = results.iter().map(|r| r.loss_fm).sum::<f64>() / n;
        // the optimized objective is linear in the per-sample losses, so
        // report it through the same decomposition
        let loss_total = match mode {
            Mode::ActionFree => loss_wm,
            Mode::ActionLabeled => loss_fm + self.config.beta as f64 * loss_wm,
        };
        let record = StepRecord {
            metrics: StepMetrics {
                step: self.step,
                loss_total,
                loss_wm,
                loss_fm,
                lr_group0: lr0 as f64,
                lr_group1: lr1 as f64,
            },
            mode,
            grad_norms,
        };
        self.history.push(record.metrics);
        self.records.push(record);
        Ok(record)
    }

    /// Mode and windows for the step that follows `step` completed steps.
    /// Depends only on the seed and the step index.
    pub fn draw_batch<'d>(&self, data: &'d TrainData, step: usize) -> Result<(Mode, Vec<Sample<'d>>)> {
        let seed = self.config.seed;
        let free = self.config.ratio > 0.0
            && rng::stream(seed, &[purpose::MODE, step as u64]).gen::<f32>() < self.config.ratio;
        let (mode, windows, episodes) = if free {
            (Mode::ActionFree, &data.free_windows, &data.action_free)
        } else {
            (Mode::ActionLabeled, &data.labeled_windows, &data.labeled)
        };
        if windows.is_empty() {
            return Err(Error::Config(format!("no training windows available for {mode:?} batches")));
        }
        let mut r = rng::stream(seed, &[purpose::BATCH, step as u64]);
        let batch = (0..self.config.batch_size)
            .map(|b| {
                let w = windows[r.gen_range(0..windows.len())];
                Sample {
                    episode: &episodes[w.episode],
                    start: w.start,
                    flow_seed: rng::derive_seed(seed, &[purpose::FLOW, step as u64, b as u64]),
                }
            })
            .collect();
        Ok((mode, batch))
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.normalizer != self.normalizer {
            return Err(Error::Config("dataset action bounds differ from the environment bounds".into()));
        }
        if self.config.ratio > 0.0 && data.free_windows.is_empty() {
            return Err(Error::Config("ratio > 0 needs an action-free dataset".into()));
        }
        if self.config.ratio < 1.0 && data.labeled_windows.is_empty() {
            return Err(Error::Config("ratio < 1 needs action-labeled windows".into()));
        }
        Ok(())
    }

    /// Trains until `total_steps` (or `opts.stop_at`). With an output
    /// directory, (re)writes `metrics.csv` including earlier history,
    /// writes `checkpoint-<step>.bin` every `checkpoint_every` steps and
    /// `checkpoint.bin` at the end.
    pub fn run(&mut self, data: &TrainData, opts: &RunOptions) -> Result<()> {
        self.check_data(data)?;
        let stop = opts.stop_at.unwrap_or(self.config.total_steps).min(self.config.total_steps);
        let mut log = match &opts.out_dir {
            Some(dir) => Some(MetricsLog::create(dir, &self.history)?),
            None => None,
        };
        while self.step < stop {
            let (mode, batch) = self.draw_batch(data, self.step)?;
            let record = self.train_step(&batch, mode)?;
            if let Some(log) = &mut log {
                log.append(&record.metrics)?;
            }
            if let Some(dir) = &opts.out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < stop {
                    self.save(&dir.join(format!("checkpoint-{}.bin", self.step)))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            self.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_trainer(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.into_trainer()
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.history
    }
}

struct MetricsLog {
    file: fs::File,
    path: PathBuf,
}

impl MetricsLog {
    fn create(dir: &Path, history: &[StepMetrics]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut text = format!("{METRICS_HEADER}\n");
        for r in history {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog { file, path })
    }

    fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}
