//! Generation, storage, training and checkpointing end to end on a tiny
//! model.

use jepa_act_core::data_synth::{generate_episodes, read_dataset, write_dataset, GenerateConfig};
use jepa_act_core::trainer::{Mode, RunOptions, TrainConfig, TrainData, Trainer};
use jepa_act_core::{Model, ModelConfig, ParamGroup};

fn small(seed: u64, action_free: bool) -> GenerateConfig {
    GenerateConfig { n_episodes: 4, seed, image_size: 16, ticks: 12, action_free, ..Default::default() }
}

fn config(steps: usize, ratio: f32) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        total_steps: steps,
        warmup_steps: 2,
        batch_size: 2,
        ratio,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    }
}

fn data(cfg: &TrainConfig) -> TrainData {
    let dir = tempfile::tempdir().unwrap();
    let (l, f) = (dir.path().join("l"), dir.path().join("f"));
    write_dataset(&l, &small(7, false), &generate_episodes(&small(7, false)).unwrap()).unwrap();
    write_dataset(&f, &small(8, true), &generate_episodes(&small(8, true)).unwrap()).unwrap();
    let (labeled, free) = (read_dataset(&l).unwrap(), read_dataset(&f).unwrap());
    let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    TrainData::prepare(&model, &labeled, Some(&free)).unwrap()
}

#[test]
fn datasets_round_trip_exactly() {
    let cfg = small(3, false);
    let eps = generate_episodes(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &cfg, &eps).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.episodes.len(), eps.len());
    for (a, b) in eps.iter().zip(&back.episodes) {
        assert!(a.frames.bit_eq(&b.frames));
        assert!(a.actions.as_ref().unwrap().bit_eq(b.actions.as_ref().unwrap()));
        assert_eq!(a.meta.instruction, b.meta.instruction);
    }
    let free = generate_episodes(&small(3, true)).unwrap();
    assert!(free.iter().all(|e| e.actions.is_none()));
    // same seed, same pixels: only the labels are dropped
    assert!(free[0].frames.bit_eq(&eps[0].frames));
}

#[test]
fn training_is_deterministic_and_checkpoints_resume_exactly() {
    let cfg = config(6, 0.5);
    let d = data(&cfg);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(&d, &RunOptions::default()).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.run(&d, &RunOptions { stop_at: Some(2), ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    b.save(&path).unwrap();
    let mut c = Trainer::load(&path).unwrap();
    assert_eq!(c.step, 2);
    c.run(&d, &RunOptions::default()).unwrap();
    assert_eq!(a.history.len(), 6);
    for (x, y) in a.history.iter().zip(&c.history) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        assert_eq!(x.lr_group1.to_bits(), y.lr_group1.to_bits());
    }
    for ((_, p), (_, q)) in a.model.store.iter().zip(c.model.store.iter()) {
        assert!(p.value.bit_eq(&q.value), "{} differs after resume", p.name);
    }
    for m in &a.history {
        assert!(m.loss_total.is_finite() && m.loss_wm >= 0.0 && m.loss_fm >= 0.0);
    }
}

#[test]
fn action_free_steps_leave_the_head_and_target_encoder_untouched() {
    let cfg = config(4, 1.0);
    let d = data(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.model.store.clone();
    t.run(&d, &RunOptions::default()).unwrap();
    assert!(t.records.iter().all(|r| r.mode == Mode::ActionFree));
    assert!(t.history.iter().all(|m| m.loss_fm == 0.0 && m.loss_total == m.loss_wm));
    let mut backbone_moved = false;
    for ((_, p), (_, q)) in before.iter().zip(t.model.store.iter()) {
        match p.group {
            ParamGroup::ActionHead | ParamGroup::Frozen => {
                assert!(p.value.bit_eq(&q.value), "{} changed", p.name)
            }
            ParamGroup::Backbone => backbone_moved |= !p.value.bit_eq(&q.value),
        }
    }
    assert!(backbone_moved);
}

#[test]
fn inconsistent_configs_are_rejected() {
    let mut cfg = config(4, 0.25);
    cfg.model.horizon = 16;
    assert!(Trainer::new(cfg.clone()).is_err());
    cfg.model.k_override = Some(2);
    assert!(cfg.validate().is_ok());
    let mut bad = config(4, 1.5);
    assert!(Trainer::new(bad.clone()).is_err());
    bad.ratio = 0.5;
    bad.warmup_steps = 10;
    assert!(Trainer::new(bad).is_err());
}
