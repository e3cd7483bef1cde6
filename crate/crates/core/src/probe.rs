//! Structural checks on a model (leakage, mask soundness, frozen encoder)
//! and the action-relevance statistic on paired episodes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Dataset, Episode, PairRole};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AttnMask, Graph, ParamGroup, Tensor};
use crate::rng::{self, purpose};
use crate::trainer::PreparedEpisode;
use crate::world_model::{build_mask, wm_loss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ProbeReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        ProbeReport {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    /// `PASS name: detail` per check.
    pub fn lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

fn noise(shape: &[usize], seed: u64, tags: &[u64]) -> Result<Tensor> {
    let mut r = rng::stream(seed, tags);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect())
}

/// Replaces every frame after `start` in both views with noise and checks
/// that the backbone outputs of the window are bit-identical.
pub fn check_leakage(model: &Model, ep: &PreparedEpisode, start: usize, seed: u64) -> Result<CheckResult> {
    let cfg = &model.config;
    let base = model.encode(&ep.sequence(cfg, start)?)?;
    let mut corrupted = ep.clone();
    let s = corrupted.frames.shape().to_vec();
    let per = s[2] * s[3] * s[4];
    let mut r = rng::stream(seed, &[purpose::PROBE, 0]);
    let data = corrupted.frames.data_mut();
    let mut touched = 0;
    for v in 0..s[0] {
        for t in start + 1..s[1] {
            let off = (v * s[1] + t) * per;
            for x in &mut data[off..off + per] {
                *x = r.gen_range(-10.0..10.0);
            }
            touched += 1;
        }
    }
    let after = model.encode(&corrupted.sequence(cfg, start)?)?;
    let same = base.0.bit_eq(&after.0) && base.1.bit_eq(&after.1);
    Ok(CheckResult::new(
        "leakage",
        same,
        format!("{touched} future frames replaced; (z, z_a) {}", if same { "bit-identical" } else { "changed" }),
    ))
}

/// Brute-force block rule, walking the token list.
fn mask_oracle(t: usize, k: usize, n_s: usize) -> AttnMask {
    let mut step_of = Vec::new();
    for i in 0..t {
        step_of.extend(std::iter::repeat(i).take(k + n_s));
    }
    let n = step_of.len();
    AttnMask::from_fn(n, n, |p, q| step_of[q] <= step_of[p])
}

/// Compares the world-model mask with the oracle, then perturbs the states
/// and latents of each step `m` and requires every prediction of an earlier
/// step to stay bit-identical. `mask` overrides the model's own mask, which
/// is how a corrupted mask is shown to be caught.
pub fn check_mask_soundness(model: &Model, seed: u64, mask: Option<&AttnMask>) -> Result<CheckResult> {
    let cfg = &model.config;
    let wm = &model.world_model;
    let (t, k, n_s) = (wm.horizon, wm.k, wm.state_tokens);
    let built = build_mask(t, k, n_s);
    if built != mask_oracle(t, k, n_s) {
        return Ok(CheckResult::new("mask_soundness", false, "mask differs from the block-rule oracle"));
    }
    let mask = mask.unwrap_or(&built);
    let states = noise(&[t * n_s, cfg.state_width()], seed, &[purpose::PROBE, 1])?;
    let z = noise(&[t * k, cfg.backbone.width], seed, &[purpose::PROBE, 2])?;
    let run = |s: &Tensor, z: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new(&model.store);
        let (sv, zv) = (g.input(s.clone())?, g.input(z.clone())?);
        let p = wm.predict_with_mask(&mut g, sv, zv, mask)?;
        Ok(g.value(p).clone())
    };
    let base = run(&states, &z)?;
    let width = base.cols();
    for m in 1..t {
        let (mut s2, mut z2) = (states.clone(), z.clone());
        let d = cfg.state_width();
        for x in &mut s2.data_mut()[m * n_s * d..(m + 1) * n_s * d] {
            *x += 1.0;
        }
        let dz = cfg.backbone.width;
        for x in &mut z2.data_mut()[m * k * dz..(m + 1) * k * dz] {
            *x -= 1.0;
        }
        let out = run(&s2, &z2)?;
        let prefix = m * n_s * width;
        if base.data()[..prefix] != out.data()[..prefix] {
            return Ok(CheckResult::new(
                "mask_soundness",
                false,
                format!("perturbing step {m} changed a prediction made before it"),
            ));
        }
    }
    Ok(CheckResult::new(
        "mask_soundness",
        true,
        format!("mask matches oracle; no response to later steps over {t} steps"),
    ))
}

/// The encoder parameters are untrainable, bit-identical to `reference`,
/// and receive no gradient from a loss computed through them.
pub fn check_frozen(model: &Model, reference: &[Tensor], frame: &[f32], seed: u64) -> Result<CheckResult> {
    let frozen: Vec<_> = model.store.iter().filter(|(_, p)| p.group == ParamGroup::Frozen).collect();
    if frozen.is_empty() {
        return Ok(CheckResult::new("frozen_target", false, "no frozen parameters"));
    }
    if let Some((_, p)) = frozen.iter().find(|(_, p)| p.trainable) {
        return Ok(CheckResult::new("frozen_target", false, format!("{} is trainable", p.name)));
    }
    if reference.len() != frozen.len() || frozen.iter().zip(reference).any(|((_, p), r)| !p.value.bit_eq(r)) {
        return Ok(CheckResult::new("frozen_target", false, "encoder weights differ from initialization"));
    }
    let cfg = &model.config;
    let (t, k) = (cfg.horizon, cfg.k()?);
    let mut g = Graph::new(&model.store);
    let one = model.encoder.forward(&mut g, frame)?;
    let state = g.concat_rows(&[one, one])?;
    let states = g.concat_rows(&vec![state; t])?;
    let z = g.input(noise(&[t * k, cfg.backbone.width], seed, &[purpose::PROBE, 3])?)?;
    let pred = model.world_model.predict(&mut g, states, z)?;
    let target = g.input(Tensor::zeros(&g.value(pred).shape().to_vec()))?;
    let loss = wm_loss(&mut g, pred, target)?;
    let grads = g.backward(loss)?;
    let leaked = frozen
        .iter()
        .filter(|(id, _)| grads.param(*id).is_some_and(|gr| gr.data().iter().any(|&x| x != 0.0)))
        .count();
    Ok(CheckResult::new(
        "frozen_target",
        leaked == 0,
        format!("{} frozen tensors unchanged; {leaked} received gradient", frozen.len()),
    ))
}

/// Cosine distance `1 − cos(a, b)`; zero for identical vectors.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Latent actions of an episode's first window, averaged over tokens.
pub fn pooled_z(model: &Model, ep: &Episode) -> Result<Vec<f32>> {
    let ep = ep.clone().normalize_views()?;
    let seq = model.sequence(&[ep.frame(0, 0), ep.frame(1, 0)], &ep.meta.instruction)?;
    let (z, _) = model.encode(&seq)?;
    let (rows, cols) = (z.rows(), z.cols());
    let mut out = vec![0.0f32; cols];
    for r in 0..rows {
        for (o, x) in out.iter_mut().zip(z.row(r)) {
            *o += x / rows as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub groups: usize,
    /// Mean distance between same-action, different-nuisance twins.
    pub d_same: f64,
    /// Mean distance between different-action, same-nuisance twins.
    pub d_diff: f64,
    pub difference: f64,
    pub ci_level: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap_samples: usize,
    pub per_group: Vec<(u64, f64, f64)>,
}

impl RelevanceReport {
    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// D_diff − D_same over the complete pair groups of `ds`, with a percentile
/// bootstrap interval over groups.
pub fn action_relevance(model: &Model, ds: &Dataset, bootstrap: usize, seed: u64) -> Result<RelevanceReport> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<u64, [Option<&Episode>; 3]> = BTreeMap::new();
    for ep in &ds.episodes {
        let Some(pair) = &ep.meta.pair else { continue };
        let slot = match pair.role {
            PairRole::Base => 0,
            PairRole::SameAction => 1,
            PairRole::DiffAction => 2,
        };
        groups.entry(pair.group).or_default()[slot] = Some(ep);
    }
    let complete: Vec<(u64, [&Episode; 3])> = groups
        .into_iter()
        .filter_map(|(g, s)| Some((g, [s[0]?, s[1]?, s[2]?])))
        .collect();
    if complete.is_empty() {
        return Err(Error::Invalid("dataset has no complete pair groups".into()));
    }
    if bootstrap == 0 {
        return Err(Error::Config("bootstrap sample count must be positive".into()));
    }
    let mut per_group = Vec::with_capacity(complete.len());
    for (g, [base, same, diff]) in &complete {
        let zb = pooled_z(model, base)?;
        let ds_ = cosine_distance(&zb, &pooled_z(model, same)?);
        let dd = cosine_distance(&zb, &pooled_z(model, diff)?);
        per_group.push((*g, ds_, dd));
    }
    let n = per_group.len();
    let deltas: Vec<f64> = per_group.iter().map(|(_, s, d)| d - s).collect();
    let mut r = rng::stream(seed, &[purpose::BOOTSTRAP]);
    let mut means: Vec<f64> = (0..bootstrap)
        .map(|_| (0..n).map(|_| deltas[r.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let level = 0.9;
    let d_same = per_group.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let d_diff = per_group.iter().map(|p| p.2).sum::<f64>() / n as f64;
    Ok(RelevanceReport {
        groups: n,
        d_same,
        d_diff,
        difference: d_diff - d_same,
        ci_level: level,
        ci_low: percentile(&means, (1.0 - level) / 2.0),
        ci_high: percentile(&means, (1.0 + level) / 2.0),
        bootstrap_samples: bootstrap,
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_episodes, GenerateConfig};
    use crate::trainer::{tests::tiny_config, TrainData};

    fn setup() -> (Model, Dataset) {
        let cfg = GenerateConfig {
            n_episodes: 3,
            image_size: 16,
            ticks: 8,
            paired: true,
            ..Default::default()
        };
        let episodes = generate_episodes(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::data_synth::write_dataset(dir.path(), &cfg, &episodes).unwrap();
        let ds = crate::data_synth::read_dataset(dir.path()).unwrap();
        (Model::new(tiny_config().model, 3).unwrap(), ds)
    }

    #[test]
    fn structural_checks_pass_on_fresh_model() {
        let (model, ds) = setup();
        let data = TrainData::prepare(&model, &ds, None).unwrap();
        let ep = &data.labeled[0];
        assert!(check_leakage(&model, ep, 0, 1).unwrap().passed);
        assert!(check_leakage(&model, ep, 3, 2).unwrap().passed);
        assert!(check_mask_soundness(&model, 1, None).unwrap().passed);
        let fresh = Model::new(model.config.clone(), 3).unwrap().frozen_values();
        assert!(check_frozen(&model, &fresh, ep.frame(0, 0), 1).unwrap().passed);
    }

    #[test]
    fn corrupted_mask_is_caught() {
        let (model, _) = setup();
        let wm = &model.world_model;
        let mut bad = build_mask(wm.horizon, wm.k, wm.state_tokens);
        // let the first state token peek at the last block
        let n = bad.rows();
        bad.set(wm.k, n - 1, true);
        let r = check_mask_soundness(&model, 1, Some(&bad)).unwrap();
        assert!(!r.passed, "{}", r.detail);
    }

    #[test]
    fn modified_encoder_is_caught() {
        let (mut model, ds) = setup();
        let reference = model.frozen_values();
        let id = model.store.find("encoder.pos").unwrap();
        model.store.get_mut(id).value.data_mut()[0] += 1e-3;
        let frame = ds.episodes[0].frame(0, 0).to_vec();
        assert!(!check_frozen(&model, &reference, &frame, 1).unwrap().passed);
    }

    #[test]
    fn oracle_mask_matches_builder() {
        for t in [1, 2, 4, 8] {
            for k in [1, 3, 6] {
                for n_s in [1, 4, 128] {
                    assert_eq!(build_mask(t, k, n_s), mask_oracle(t, k, n_s));
                }
            }
        }
    }

    #[test]
    fn cosine_distance_basics() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(cosine_distance(&a, &a), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_twins_have_zero_distance() {
        let (model, mut ds) = setup();
        // make every twin a copy of its base episode
        let base: Vec<Episode> = ds
            .episodes
            .iter()
            .filter(|e| e.meta.pair.as_ref().unwrap().role == PairRole::Base)
            .cloned()
            .collect();
        for ep in &mut ds.episodes {
            let p = ep.meta.pair.clone().unwrap();
            let b = base.iter().find(|b| b.meta.pair.as_ref().unwrap().group == p.group).unwrap();
            ep.frames = b.frames.clone();
            ep.meta.instruction = b.meta.instruction.clone();
        }
        let r = action_relevance(&model, &ds, 50, 1).unwrap();
        assert_eq!((r.d_same, r.d_diff), (0.0, 0.0));
        assert!(r.groups >= 1);
    }

    #[test]
    fn relevance_report_is_deterministic() {
        let (model, ds) = setup();
        let a = action_relevance(&model, &ds, 200, 4).unwrap();
        let b = action_relevance(&model, &ds, 200, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.ci_high);
    }
}
