//! Structural invariants of the mask, the flow sampler, the schedule and the
//! simulator, checked over generated inputs.

use jepa_act_core::action_head::{integrate, interpolate, FlowSample};
use jepa_act_core::data_synth::env::{action_bounds, expert_action, MAX_STEP};
use jepa_act_core::data_synth::{initial_state, step_env, ActionNormalizer, NuisanceConfig, TaskKind};
use jepa_act_core::trainer::lr_at;
use jepa_act_core::world_model::{build_mask, state_rows};
use jepa_act_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Token `p` sits in step `p / (k + n_s)`; later steps are invisible.
fn mask_allows(t: usize, k: usize, n_s: usize, p: usize, q: usize) -> bool {
    let mut step = Vec::with_capacity(t * (k + n_s));
    for i in 0..t {
        for _ in 0..k + n_s {
            step.push(i);
        }
    }
    step[q] <= step[p]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn world_model_mask_is_block_causal(t in 1usize..9, k in 1usize..7, n_s in 1usize..9) {
        let m = build_mask(t, k, n_s);
        let n = t * (k + n_s);
        prop_assert_eq!((m.rows(), m.cols()), (n, n));
        for p in 0..n {
            for q in 0..n {
                prop_assert_eq!(m.get(p, q), mask_allows(t, k, n_s, p, q), "({}, {})", p, q);
            }
        }
        let rows = state_rows(t, k, n_s);
        prop_assert_eq!(rows.len(), t * n_s);
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn euler_is_exact_on_the_straight_path(steps in 1usize..33, len in 1usize..30, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[len], |_| rand::Rng::gen_range(&mut r, 0.0..1.0));
        let s = FlowSample::draw(a.clone(), &mut r);
        let v = s.target_velocity();
        let out = integrate(s.epsilon.clone(), steps, |_, _| Ok(v.clone())).unwrap();
        prop_assert!(out.max_abs_diff(&a) <= 1e-5);
        // the interpolant's endpoints are noise and data
        prop_assert!(interpolate(&a, &s.epsilon, 0.0).unwrap().bit_eq(&s.epsilon));
        prop_assert!(interpolate(&a, &s.epsilon, 1.0).unwrap().bit_eq(&a));
    }

    #[test]
    fn schedule_is_bounded_and_shaped(peak in 1e-5f32..1e-2, warmup in 0usize..50, extra in 1usize..500) {
        let total = warmup + extra;
        let lrs: Vec<f32> = (0..=total).map(|s| lr_at(s, peak, warmup, total)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak * (1.0 + 1e-6)).contains(&l)));
        prop_assert!(lrs[..=warmup].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[warmup..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((lrs[warmup] - peak).abs() <= peak * 1e-6);
        prop_assert!(lrs[total].abs() <= peak * 1e-6);
    }

    #[test]
    fn normalization_round_trips_planar_and_binarizes_gripper(
        dx in -MAX_STEP..MAX_STEP,
        dy in -MAX_STEP..MAX_STEP,
        grip in 0.0f32..1.0,
    ) {
        let (lo, hi) = action_bounds(3);
        let n = ActionNormalizer::new(lo, hi, Some(2)).unwrap();
        let z = n.normalize_one(&[dx, dy, grip]);
        prop_assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(z[2] == 0.0 || z[2] == 1.0);
        prop_assert_eq!(z[2] == 1.0, grip >= 0.5);
        let back = n.denormalize_one(&z);
        prop_assert!((back[0] - dx).abs() < 1e-6 && (back[1] - dy).abs() < 1e-6);
    }

    #[test]
    fn simulator_stays_in_bounds_under_any_actions(
        layout in any::<u64>(),
        actions in proptest::collection::vec((-0.2f32..0.2, -0.2f32..0.2, 0.0f32..1.0), 1..40),
    ) {
        let mut s = initial_state(TaskKind::PickPlace, layout, 0, &NuisanceConfig::none());
        prop_assert!(s.in_bounds());
        for (dx, dy, g) in actions {
            let next = step_env(&s, &[dx, dy, g]);
            let moved = ((next.gripper[0] - s.gripper[0]).powi(2) + (next.gripper[1] - s.gripper[1]).powi(2)).sqrt();
            prop_assert!(moved <= MAX_STEP * 2f32.sqrt() + 1e-6);
            prop_assert!(next.in_bounds());
            if let Some(i) = next.holding {
                prop_assert_eq!(next.objects[i].pos, next.gripper);
            }
            s = next;
        }
    }

    #[test]
    fn noise_free_expert_solves_every_layout(layout in any::<u64>()) {
        let mut s = initial_state(TaskKind::PickPlace, layout, 0, &NuisanceConfig::none());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let solved = (0..40).any(|_| {
            s = step_env(&s, &expert_action(&s, 3, 0.0, 0.0, &mut r));
            s.is_success()
        });
        prop_assert!(solved);
    }
}
