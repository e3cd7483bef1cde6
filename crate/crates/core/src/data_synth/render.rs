//! Software rasterizer for the tabletop scene.

use rand::Rng;

use super::env::{EnvState, OBJECT_RADIUS, PAD_HALF};
use super::NuisanceConfig;
use crate::rng;

pub const VIEW_GLOBAL: usize = 0;
pub const VIEW_WRIST: usize = 1;
/// Side length, in scene units, of the gripper-following crop.
pub const WRIST_EXTENT: f32 = 0.5;

const BACKGROUND: [f32; 3] = [0.14, 0.14, 0.16];
const OUTSIDE: [f32; 3] = [0.04, 0.04, 0.04];
const GRIPPER_OPEN: [f32; 3] = [1.0, 1.0, 1.0];
const GRIPPER_CLOSED: [f32; 3] = [0.62, 0.62, 0.62];
const FLICKER_BLOCK: usize = 8;

/// Keys the per-frame nuisance stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSeed {
    pub episode: u64,
    pub tick: u32,
}

/// What was drawn at a pixel (topmost layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Outside,
    Background,
    Pad(usize),
    Object(usize),
    Distractor(usize),
    Gripper,
}

/// `size × size × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.size + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Integer camera offset `(dx, dy)` in pixels applied to `view` at this step.
pub fn jitter_offset(nuisance: &NuisanceConfig, seed: StepSeed, view: usize) -> (i32, i32) {
    let j = nuisance.camera_jitter_px as i32;
    if j == 0 {
        return (0, 0);
    }
    let mut r = rng::stream(seed.episode, &[rng::purpose::RENDER, seed.tick as u64, view as u64, 0]);
    (r.gen_range(-j..=j), r.gen_range(-j..=j))
}

fn lighting_gain(nuisance: &NuisanceConfig, seed: StepSeed) -> f32 {
    if nuisance.lighting_drift_amp == 0.0 {
        return 1.0;
    }
    let mut r = rng::stream(seed.episode, &[rng::purpose::RENDER, u64::MAX]);
    let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
    let t = seed.tick as f32 / 24.0 * std::f32::consts::TAU;
    1.0 + nuisance.lighting_drift_amp * (t + phase).sin()
}

pub fn render(state: &EnvState, view: usize, nuisance: &NuisanceConfig, seed: StepSeed, size: usize) -> Frame {
    render_with_labels(state, view, nuisance, seed, size).0
}

/// Renders one view and returns the per-pixel label map alongside it.
pub fn render_with_labels(
    state: &EnvState,
    view: usize,
    nuisance: &NuisanceConfig,
    seed: StepSeed,
    size: usize,
) -> (Frame, Vec<Label>) {
    let mut data = vec![0.0; size * size * 3];
    let mut labels = vec![Label::Background; size * size];
    let (cx, cy, extent) = if view == VIEW_WRIST {
        (state.gripper[0], state.gripper[1], WRIST_EXTENT)
    } else {
        (0.5, 0.5, 1.0)
    };
    let px = extent / size as f32;
    for r in 0..size {
        for c in 0..size {
            let x = cx + ((c as f32 + 0.5) / size as f32 - 0.5) * extent;
            let y = cy + ((r as f32 + 0.5) / size as f32 - 0.5) * extent;
            let (rgb, label) = shade(state, x, y, px);
            let i = r * size + c;
            data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
            labels[i] = label;
        }
    }

    if nuisance.background_flicker_amp > 0.0 {
        let blocks = size.div_ceil(FLICKER_BLOCK);
        let mut r = rng::stream(seed.episode, &[rng::purpose::RENDER, seed.tick as u64, view as u64, 1]);
        let gains: Vec<f32> = (0..blocks * blocks)
            .map(|_| 1.0 + nuisance.background_flicker_amp * r.gen_range(-1.0f32..1.0))
            .collect();
        for row in 0..size {
            for col in 0..size {
                let i = row * size + col;
                if labels[i] == Label::Background {
                    let g = gains[(row / FLICKER_BLOCK) * blocks + col / FLICKER_BLOCK];
                    for ch in 0..3 {
                        data[i * 3 + ch] *= g;
                    }
                }
            }
        }
    }

    let gain = lighting_gain(nuisance, seed);
    if gain != 1.0 {
        for v in &mut data {
            *v *= gain;
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }

    let (ox, oy) = jitter_offset(nuisance, seed, view);
    if (ox, oy) != (0, 0) {
        let fill: Vec<f32> = BACKGROUND.iter().map(|v| (v * gain).clamp(0.0, 1.0)).collect();
        let mut shifted = vec![0.0; data.len()];
        let mut shifted_labels = vec![Label::Outside; labels.len()];
        for r in 0..size as i32 {
            for c in 0..size as i32 {
                let (sr, sc) = (r - oy, c - ox);
                let dst = (r as usize * size + c as usize) * 3;
                if (0..size as i32).contains(&sr) && (0..size as i32).contains(&sc) {
                    let src = (sr as usize * size + sc as usize) * 3;
                    shifted[dst..dst + 3].copy_from_slice(&data[src..src + 3]);
                    shifted_labels[dst / 3] = labels[src / 3];
                } else {
                    shifted[dst..dst + 3].copy_from_slice(&fill);
                }
            }
        }
        data = shifted;
        labels = shifted_labels;
    }
    (Frame { size, data }, labels)
}

fn shade(state: &EnvState, x: f32, y: f32, px: f32) -> ([f32; 3], Label) {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return (OUTSIDE, Label::Outside);
    }
    let mut rgb = BACKGROUND;
    let mut label = Label::Background;
    for (i, pad) in state.pads.iter().enumerate() {
        if (x - pad.pos[0]).abs() <= PAD_HALF && (y - pad.pos[1]).abs() <= PAD_HALF {
            rgb = pad.color.rgb();
            label = Label::Pad(i);
        }
    }
    // shapes narrower than a pixel still cover the pixel they sit in
    let r = OBJECT_RADIUS.max(0.75 * px);
    for (i, d) in state.distractors.iter().enumerate() {
        if d.shape.contains(x - d.pos[0], y - d.pos[1], r) {
            rgb = d.color.rgb();
            label = Label::Distractor(i);
        }
    }
    let order = (0..state.objects.len()).filter(|&i| Some(i) != state.holding).chain(state.holding);
    for i in order {
        let o = &state.objects[i];
        if o.shape.contains(x - o.pos[0], y - o.pos[1], r) {
            rgb = o.color.rgb();
            label = Label::Object(i);
        }
    }
    let (gx, gy) = (x - state.gripper[0], y - state.gripper[1]);
    let arm = 0.055;
    let half_width = 0.016f32.max(0.5 * px);
    let on_cross = (gx.abs() <= half_width && gy.abs() <= arm) || (gy.abs() <= half_width && gx.abs() <= arm);
    if on_cross {
        rgb = if state.gripper_closed { GRIPPER_CLOSED } else { GRIPPER_OPEN };
        label = Label::Gripper;
    }
    (rgb, label)
}

#[cfg(test)]
mod tests {
    use super::super::env::{Color, Pad, PadColor, SceneObject, Shape};
    use super::*;

    fn scene(distractors: usize) -> EnvState {
        EnvState {
            gripper: [0.3, 0.6],
            gripper_closed: false,
            holding: None,
            objects: vec![SceneObject {
                pos: [0.5, 0.4],
                color: Color::Blue,
                shape: Shape::Square,
            }],
            target_object: 0,
            pads: vec![Pad {
                pos: [0.75, 0.75],
                color: PadColor::Magenta,
            }],
            target_pad: 0,
            distractors: (0..distractors)
                .map(|i| SceneObject {
                    pos: [0.15 + 0.2 * i as f32, 0.12],
                    color: Color::Yellow,
                    shape: Shape::Triangle,
                })
                .collect(),
        }
    }

    const SEED: StepSeed = StepSeed { episode: 9, tick: 3 };

    #[test]
    fn clean_render_is_deterministic() {
        let s = scene(0);
        let n = NuisanceConfig::none();
        for view in [VIEW_GLOBAL, VIEW_WRIST] {
            assert_eq!(render(&s, view, &n, SEED, 32), render(&s, view, &n, SEED, 32));
        }
    }

    #[test]
    fn jitter_is_a_pure_translation() {
        let s = scene(0);
        let clean = render(&s, VIEW_GLOBAL, &NuisanceConfig::none(), SEED, 32);
        let jit = NuisanceConfig {
            camera_jitter_px: 2,
            ..NuisanceConfig::none()
        };
        let mut moved = 0;
        for tick in 0..12 {
            let seed = StepSeed { episode: 4, tick };
            let (ox, oy) = jitter_offset(&jit, seed, VIEW_GLOBAL);
            assert!(ox.abs() <= 2 && oy.abs() <= 2);
            moved += ((ox, oy) != (0, 0)) as usize;
            let f = render(&s, VIEW_GLOBAL, &jit, seed, 32);
            for r in 0..32i32 {
                for c in 0..32i32 {
                    let (sr, sc) = (r - oy, c - ox);
                    if (0..32).contains(&sr) && (0..32).contains(&sc) {
                        assert_eq!(f.pixel(r as usize, c as usize), clean.pixel(sr as usize, sc as usize));
                    }
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn distractors_are_drawn() {
        let s = scene(3);
        let (_, labels) = render_with_labels(&s, VIEW_GLOBAL, &NuisanceConfig::none(), SEED, 64);
        for i in 0..3 {
            assert!(labels.contains(&Label::Distractor(i)), "distractor {i} not visible");
        }
        assert!(!labels.contains(&Label::Distractor(3)));
        assert!(labels.contains(&Label::Object(0)));
    }

    #[test]
    fn wrist_view_follows_gripper() {
        let s = scene(0);
        let (_, labels) = render_with_labels(&s, VIEW_WRIST, &NuisanceConfig::none(), SEED, 32);
        assert_eq!(labels[16 * 32 + 16], Label::Gripper);
    }

    #[test]
    fn values_stay_in_unit_range_under_nuisance() {
        let s = scene(2);
        let n = NuisanceConfig {
            camera_jitter_px: 3,
            background_flicker_amp: 1.0,
            distractor_count: 2,
            lighting_drift_amp: 1.0,
        };
        for tick in 0..8 {
            let f = render(&s, VIEW_GLOBAL, &n, StepSeed { episode: 1, tick }, 32);
            assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
