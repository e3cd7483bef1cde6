//! Point-kinematics tabletop: a gripper moves on the unit square, grasps an
//! object when it closes within reach, and carries it until it opens.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const SCENE_MIN: f32 = 0.0;
pub const SCENE_MAX: f32 = 1.0;
pub const GRIPPER_MARGIN: f32 = 0.04;
pub const MAX_STEP: f32 = 0.06;
pub const GRASP_RADIUS: f32 = 0.06;
pub const OBJECT_RADIUS: f32 = 0.06;
pub const PAD_HALF: f32 = 0.08;
/// Success when the target object's center is within this distance of the
/// target pad center (0.05 × scene width).
pub const SUCCESS_RADIUS: f32 = 0.05 * (SCENE_MAX - SCENE_MIN);
pub const GRIPPER_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.92, 0.16, 0.14],
            Color::Green => [0.18, 0.82, 0.22],
            Color::Blue => [0.22, 0.36, 0.98],
            Color::Yellow => [0.96, 0.86, 0.12],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Point-in-shape test for a shape of radius `r` centered at the origin.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up (negative y is up in image space)
                let h = 1.8 * r;
                let top = -0.9 * r;
                let rel = dy - top;
                rel >= 0.0 && rel <= h && dx.abs() <= rel / h * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadColor {
    Cyan,
    Magenta,
    Orange,
}

impl PadColor {
    pub const ALL: [PadColor; 3] = [PadColor::Cyan, PadColor::Magenta, PadColor::Orange];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            PadColor::Cyan => [0.10, 0.62, 0.64],
            PadColor::Magenta => [0.64, 0.16, 0.62],
            PadColor::Orange => [0.70, 0.42, 0.10],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            PadColor::Cyan => "cyan",
            PadColor::Magenta => "magenta",
            PadColor::Orange => "orange",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub pos: [f32; 2],
    pub color: Color,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pad {
    pub pos: [f32; 2],
    pub color: PadColor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper: [f32; 2],
    pub gripper_closed: bool,
    /// Index into `objects` of the held object.
    pub holding: Option<usize>,
    pub objects: Vec<SceneObject>,
    pub target_object: usize,
    pub pads: Vec<Pad>,
    pub target_pad: usize,
    /// Visual-only clutter; never interacts with the gripper.
    pub distractors: Vec<SceneObject>,
}

/// Per-dimension raw action bounds. The last dimension is the gripper
/// command; dimensions 0 and 1 are planar deltas. Any dimensions in between
/// (the 7-dim mode) are accepted and ignored by the kinematics.
pub fn action_bounds(action_dim: usize) -> (Vec<f32>, Vec<f32>) {
    let mut lo = vec![-MAX_STEP; action_dim];
    let mut hi = vec![MAX_STEP; action_dim];
    lo[action_dim - 1] = 0.0;
    hi[action_dim - 1] = 1.0;
    (lo, hi)
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl EnvState {
    pub fn target_pos(&self) -> [f32; 2] {
        self.objects[self.target_object].pos
    }

    pub fn goal_pos(&self) -> [f32; 2] {
        self.pads[self.target_pad].pos
    }

    pub fn is_success(&self) -> bool {
        dist(self.target_pos(), self.goal_pos()) <= SUCCESS_RADIUS
    }

    pub fn in_bounds(&self) -> bool {
        let ok = |p: [f32; 2]| p.iter().all(|&c| (SCENE_MIN..=SCENE_MAX).contains(&c));
        ok(self.gripper)
            && self.objects.iter().all(|o| ok(o.pos))
            && self.pads.iter().all(|p| ok(p.pos))
            && self.distractors.iter().all(|d| ok(d.pos))
    }

    /// Proprioceptive features: gripper position, closed flag, holding
    /// flag, padded to `dim` with zeros.
    pub fn proprio(&self, dim: usize) -> Vec<f32> {
        let mut v = vec![
            self.gripper[0],
            self.gripper[1],
            self.gripper_closed as u8 as f32,
            self.holding.is_some() as u8 as f32,
        ];
        v.resize(dim, 0.0);
        v
    }
}

/// Advances the scene by one control tick. Out-of-range actions are clipped.
pub fn step_env(state: &EnvState, action: &[f32]) -> EnvState {
    let mut next = state.clone();
    let a = action.len();
    if a < 2 {
        return next;
    }
    let dx = action[0].clamp(-MAX_STEP, MAX_STEP);
    let dy = action[1].clamp(-MAX_STEP, MAX_STEP);
    let lo = SCENE_MIN + GRIPPER_MARGIN;
    let hi = SCENE_MAX - GRIPPER_MARGIN;
    next.gripper = [
        (state.gripper[0] + dx).clamp(lo, hi),
        (state.gripper[1] + dy).clamp(lo, hi),
    ];
    let closed = a >= 3 && action[a - 1] >= GRIPPER_THRESHOLD;
    next.gripper_closed = closed;
    if !closed {
        next.holding = None;
    } else if !state.gripper_closed && next.holding.is_none() {
        let nearest = next
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(o.pos, next.gripper)))
            .filter(|&(_, d)| d <= GRASP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        next.holding = nearest.map(|(i, _)| i);
    }
    if let Some(i) = next.holding {
        next.objects[i].pos = next.gripper;
    }
    next
}

/// Scripted pick-and-place controller. `noise` perturbs planar deltas by a
/// bounded amount (|noise| ≤ `noise_bound`).
pub fn expert_action<R: Rng>(state: &EnvState, action_dim: usize, noise_std: f32, noise_bound: f32, rng: &mut R) -> Vec<f32> {
    let mut jitter = || -> f32 {
        if noise_std <= 0.0 {
            return 0.0;
        }
        // sum of uniforms: cheap, bounded, roughly Gaussian
        let u: f32 = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).sum::<f32>() * 0.5 * noise_std * 1.732;
        u.clamp(-noise_bound, noise_bound)
    };
    let toward = |from: [f32; 2], to: [f32; 2]| -> [f32; 2] {
        let d = [to[0] - from[0], to[1] - from[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n <= MAX_STEP {
            d
        } else {
            [d[0] / n * MAX_STEP, d[1] / n * MAX_STEP]
        }
    };
    let g = state.gripper;
    let (delta, close) = match state.holding {
        Some(i) if i == state.target_object => {
            if state.is_success() && dist(g, state.goal_pos()) < 1e-3 {
                ([0.0, 0.0], false)
            } else {
                let d = toward(g, state.goal_pos());
                // keep noise from overshooting when close to the goal
                (d, true)
            }
        }
        Some(_) => ([0.0, 0.0], false),
        None => {
            if state.is_success() {
                ([0.0, 0.0], false)
            } else {
                let obj = state.target_pos();
                let reach = dist(g, obj) <= MAX_STEP;
                (toward(g, obj), reach)
            }
        }
    };
    let near_goal = dist(g, state.goal_pos()) <= 2.0 * MAX_STEP;
    let near_obj = state.holding.is_none() && dist(g, state.target_pos()) <= 2.0 * MAX_STEP;
    let moving = delta[0] != 0.0 || delta[1] != 0.0;
    let mut out = vec![0.0; action_dim];
    if moving && !near_goal && !near_obj {
        out[0] = (delta[0] + jitter()).clamp(-MAX_STEP, MAX_STEP);
        out[1] = (delta[1] + jitter()).clamp(-MAX_STEP, MAX_STEP);
    } else {
        out[0] = delta[0];
        out[1] = delta[1];
    }
    out[action_dim - 1] = if close { 1.0 } else { 0.0 };
    out
}
