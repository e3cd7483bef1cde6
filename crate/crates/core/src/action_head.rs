//! Conditional flow-matching action generator.
//!
//! The velocity network is a small transformer over the action chunk that
//! cross-attends to the conditioning tokens `z_a` and a proprioceptive state
//! token. Sampling integrates the learned field with forward Euler from
//! Gaussian noise at `t = 0` to actions at `t = 1`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Linear, Stack};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::rng;

pub fn interpolate(a_clean: &Tensor, epsilon: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("flow time {t} outside [0, 1]")));
    }
    if a_clean.shape() != epsilon.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: a_clean.shape().to_vec(),
            rhs: epsilon.shape().to_vec(),
        });
    }
    let data = a_clean
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(&a, &e)| (1.0 - t) * e + t * a)
        .collect();
    Tensor::new(a_clean.shape().to_vec(), data)
}

/// One training draw for the flow objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub a_clean: Tensor,
    pub epsilon: Tensor,
    pub t: f32,
}

impl FlowSample {
    pub fn draw<R: Rng>(a_clean: Tensor, rng: &mut R) -> Self {
        let epsilon = Tensor::from_fn(a_clean.shape(), |_| rng.sample(StandardNormal));
        let t = rng.gen_range(0.0..=1.0);
        FlowSample { a_clean, epsilon, t }
    }

    pub fn a_t(&self) -> Result<Tensor> {
        interpolate(&self.a_clean, &self.epsilon, self.t)
    }

    /// `a_clean − epsilon`, constant along the path.
    pub fn target_velocity(&self) -> Tensor {
        let data = self.a_clean.data().iter().zip(self.epsilon.data()).map(|(a, e)| a - e).collect();
        Tensor::new(self.a_clean.shape().to_vec(), data).expect("same shape")
    }
}

/// Per-sample objective `‖v − (a_clean − ε)‖²`; batches average these.
pub fn fm_loss(g: &mut Graph, velocity: Var, target: Var) -> Result<Var> {
    let n = g.value(target).numel();
    let m = g.mse(velocity, target)?;
    g.scale(m, n as f32)
}

#[derive(Clone, Debug)]
pub struct ActionHead {
    pub action_in: Linear,
    pub time_mlp: Linear,
    pub state_in: Linear,
    pub cond_proj: Linear,
    pub pos: ParamId,
    pub stack: Stack,
    pub out: Linear,
    pub horizon: usize,
    pub action_dim: usize,
    pub width: usize,
}

impl ActionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.head.width;
        let g = ParamGroup::ActionHead;
        ActionHead {
            action_in: Linear::new(store, "head.action_in", cfg.action_dim, w, g, rng),
            time_mlp: Linear::new(store, "head.time_mlp", w, w, g, rng),
            state_in: Linear::new(store, "head.state_in", cfg.state_dim, w, g, rng),
            cond_proj: Linear::new(store, "head.cond_proj", cfg.backbone.width, w, g, rng),
            pos: store.add_normal("head.pos", &[cfg.action_horizon, w], 0.1, g, rng),
            stack: Stack::new(store, "head", &cfg.head, Some(w), g, rng),
            out: Linear::with_std(store, "head.out", w, cfg.action_dim, 0.02, g, rng),
            horizon: cfg.action_horizon,
            action_dim: cfg.action_dim,
            width: w,
        }
    }

    /// `a_t` is `[H, A]`, `z_a` is `[M, d_model]`, `state` is `[1, state_dim]`.
    pub fn velocity(&self, g: &mut Graph, a_t: Var, t: f32, z_a: Var, state: Var) -> Result<Var> {
        let x = self.action_in.forward(g, a_t)?;
        let pos = g.param(self.pos);
        let x = g.add(x, pos)?;
        let temb = g.input(sinusoidal_embedding(t, self.width))?;
        let temb = self.time_mlp.forward(g, temb)?;
        let temb = g.gelu(temb)?;
        let x = g.add_row(x, temb)?;
        // proprioception conditions every token directly; z_a through
        // cross-attention
        let st = self.state_in.forward(g, state)?;
        let x = g.add_row(x, st)?;
        let ctx = self.cond_proj.forward(g, z_a)?;
        let h = self.stack.forward(g, x, None, Some(ctx))?;
        self.out.forward(g, h.hidden)
    }

    /// Samples an action chunk in normalized units, clamped to `[0, 1]`.
    pub fn generate(&self, store: &ParamStore, z_a: &Tensor, state: &Tensor, steps: usize, seed: u64) -> Result<Tensor> {
        let eps = noise(&[self.horizon, self.action_dim], seed);
        let a = integrate(eps, steps, |a, t| {
            let mut g = Graph::new(store);
            let (av, zv, sv) = (g.input(a.clone())?, g.input(z_a.clone())?, g.input(state.clone())?);
            let v = self.velocity(&mut g, av, t, zv, sv)?;
            Ok(g.value(v).clone())
        })?;
        Ok(clamp_unit(a))
    }
}

/// Standard normal draw from a seed-keyed stream.
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::purpose::FLOW]);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

/// Forward Euler on `da/dt = field(a, t)` over `[0, 1]` in `steps` uniform
/// steps, starting from `a = start`.
pub fn integrate(
    start: Tensor,
    steps: usize,
    mut field: impl FnMut(&Tensor, f32) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Invalid("denoising steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f32;
    let mut a = start;
    for i in 0..steps {
        let v = field(&a, i as f32 * dt)?;
        if v.shape() != a.shape() {
            return Err(Error::Shape {
                op: "integrate",
                lhs: a.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        for (x, dv) in a.data_mut().iter_mut().zip(v.data()) {
            *x += dt * dv;
        }
    }
    Ok(a)
}

pub fn clamp_unit(mut a: Tensor) -> Tensor {
    for v in a.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = rand_tensor(&[7, 3], 1);
        let e = noise(&[7, 3], 2);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &e, 0.0).unwrap(), e);
        let mid = interpolate(&a, &e, 0.5).unwrap();
        for i in 0..21 {
            assert!((mid.data()[i] - (a.data()[i] + e.data()[i]) / 2.0).abs() <= 1e-6);
        }
        assert!(interpolate(&a, &e, 1.5).is_err());
        assert!(interpolate(&a, &e, -0.1).is_err());
    }

    #[test]
    fn oracle_field_recovers_target_for_any_step_count() {
        let target = rand_tensor(&[7, 3], 4);
        for steps in [1, 2, 4, 16, 33] {
            let eps = noise(&[7, 3], steps as u64);
            let v = FlowSample {
                a_clean: target.clone(),
                epsilon: eps.clone(),
                t: 0.0,
            }
            .target_velocity();
            let out = integrate(eps, steps, |_, _| Ok(v.clone())).unwrap();
            assert!(out.max_abs_diff(&target) <= 1e-5, "steps {steps}");
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(integrate(Tensor::zeros(&[1, 1]), 0, |a, _| Ok(a.clone())).is_err());
    }

    fn setup() -> (ParamStore, ActionHead, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let head = ActionHead::new(&mut store, &cfg, &mut rng::stream(4, &[rng::purpose::INIT]));
        (store, head, cfg)
    }

    #[test]
    fn velocity_shape_determinism_and_conditioning() {
        let (store, head, cfg) = setup();
        let a = rand_tensor(&[cfg.action_horizon, cfg.action_dim], 1);
        let z = rand_tensor(&[cfg.action_tokens, cfg.backbone.width], 2);
        let s = rand_tensor(&[1, cfg.state_dim], 3);
        let run = |z: &Tensor| {
            let mut g = Graph::new(&store);
            let (av, zv, sv) = (g.input(a.clone()).unwrap(), g.input(z.clone()).unwrap(), g.input(s.clone()).unwrap());
            let v = head.velocity(&mut g, av, 0.3, zv, sv).unwrap();
            g.value(v).clone()
        };
        let v = run(&z);
        assert_eq!(v.shape(), &[cfg.action_horizon, cfg.action_dim]);
        assert!(v.bit_eq(&run(&z)));
        let mut z2 = z.clone();
        z2.data_mut()[0] += 1.0;
        assert!(!v.bit_eq(&run(&z2)));
    }

    #[test]
    fn single_step_generation_is_one_euler_step() {
        let (store, head, cfg) = setup();
        let z = rand_tensor(&[cfg.action_tokens, cfg.backbone.width], 2);
        let s = rand_tensor(&[1, cfg.state_dim], 3);
        let eps = noise(&[cfg.action_horizon, cfg.action_dim], 11);
        let mut g = Graph::new(&store);
        let (av, zv, sv) = (g.input(eps.clone()).unwrap(), g.input(z.clone()).unwrap(), g.input(s.clone()).unwrap());
        let v = head.velocity(&mut g, av, 0.0, zv, sv).unwrap();
        let expect: Vec<f32> = eps.data().iter().zip(g.value(v).data()).map(|(e, v)| (e + v).clamp(0.0, 1.0)).collect();
        let out = head.generate(&store, &z, &s, 1, 11).unwrap();
        assert_eq!(out.data(), &expect[..]);
        assert!(out.bit_eq(&head.generate(&store, &z, &s, 1, 11).unwrap()));
    }

    #[test]
    fn fm_loss_oracles() {
        let store = ParamStore::new();
        let a = rand_tensor(&[7, 3], 5);
        let e = noise(&[7, 3], 6);
        let sample = FlowSample {
            a_clean: a.clone(),
            epsilon: e.clone(),
            t: 0.4,
        };
        let mut g = Graph::new(&store);
        let target = g.input(sample.target_velocity()).unwrap();
        let exact = g.input(sample.target_velocity()).unwrap();
        let l = fm_loss(&mut g, exact, target).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let zeros = g.input(Tensor::zeros(&[7, 3])).unwrap();
        let l = fm_loss(&mut g, zeros, target).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..7 {
            for j in 0..3 {
                let d = (a.row(i)[j] - e.row(i)[j]) as f64;
                oracle += d * d;
            }
        }
        assert!((g.value(l).data()[0] as f64 - oracle).abs() <= 1e-6 * oracle.max(1.0));
    }
}
