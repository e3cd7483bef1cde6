use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Policy backbone and latent world model.
    Backbone,
    /// Flow-matching action head.
    ActionHead,
    /// Frozen target encoder; never optimized.
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Owns every parameter of a model. Modules refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: group != ParamGroup::Frozen,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0f32, std).expect("std must be positive");
        let value = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, value, group)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `grads` into the stored gradients of trainable parameters.
    /// Entries for non-trainable parameters are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Squared L2 norm of stored gradients, restricted by `filter`.
    pub fn grad_sq_norm(&self, filter: impl Fn(&Parameter) -> bool) -> f64 {
        self.params
            .iter()
            .filter(|p| filter(p))
            .map(|p| p.grad.sq_norm())
            .sum()
    }

    /// Replaces parameter values from `(name, tensor)` pairs; every stored
    /// parameter must be present with a matching shape.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) params: Vec<(ParamId, Tensor)>,
    pub(crate) inputs: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient with respect to an input registered with
    /// [`Graph::input_tracked`](super::Graph::input_tracked).
    pub fn input(&self, var: super::Var) -> Option<&Tensor> {
        self.inputs
            .iter()
            .find(|(v, _)| *v == var.0)
            .map(|(_, t)| t)
    }

    /// Sums `other` into `self`, matching entries by parameter id.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => self.params.push((id, g)),
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (_, g) in &mut self.params {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}
