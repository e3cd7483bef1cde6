use serde::{Deserialize, Serialize};

use super::env::GRIPPER_THRESHOLD;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Min–max action normalization to `[0, 1]` with a binarized gripper channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Index of the gripper channel, thresholded instead of rescaled.
    pub gripper_dim: Option<usize>,
    pub gripper_threshold: f32,
}

impl ActionNormalizer {
    pub fn new(min: Vec<f32>, max: Vec<f32>, gripper_dim: Option<usize>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::Invalid(format!(
                "bounds length mismatch: {} vs {}",
                min.len(),
                max.len()
            )));
        }
        if let Some(i) = min.iter().zip(&max).position(|(lo, hi)| !(hi > lo)) {
            return Err(Error::Invalid(format!(
                "degenerate bounds on dim {i}: [{}, {}]",
                min[i], max[i]
            )));
        }
        if gripper_dim.is_some_and(|g| g >= min.len()) {
            return Err(Error::Invalid("gripper dim out of range".into()));
        }
        Ok(ActionNormalizer {
            min,
            max,
            gripper_dim,
            gripper_threshold: GRIPPER_THRESHOLD,
        })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize_one(&self, raw: &[f32]) -> Vec<f32> {
        raw.iter()
            .enumerate()
            .map(|(d, &v)| {
                if Some(d) == self.gripper_dim {
                    if v >= self.gripper_threshold {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    ((v - self.min[d]) / (self.max[d] - self.min[d])).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    pub fn denormalize_one(&self, norm: &[f32]) -> Vec<f32> {
        norm.iter()
            .enumerate()
            .map(|(d, &v)| {
                if Some(d) == self.gripper_dim {
                    if v >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    self.min[d] + v * (self.max[d] - self.min[d])
                }
            })
            .collect()
    }

    /// Normalizes a `[steps, dim]` action tensor.
    pub fn normalize(&self, actions: &Tensor) -> Result<Tensor> {
        self.map_rows(actions, |r| self.normalize_one(r))
    }

    pub fn denormalize(&self, actions: &Tensor) -> Result<Tensor> {
        self.map_rows(actions, |r| self.denormalize_one(r))
    }

    fn map_rows(&self, t: &Tensor, f: impl Fn(&[f32]) -> Vec<f32>) -> Result<Tensor> {
        if t.cols() != self.dim() {
            return Err(Error::Shape {
                op: "action_normalize",
                lhs: t.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        let data = t.data().chunks(self.dim()).flat_map(f).collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}

/// Brings a `[V, steps, H, W, 3]` frame tensor to exactly two views:
/// a single view is duplicated, extra views beyond the first two dropped.
pub fn normalize_views(frames: &Tensor) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 5 {
        return Err(Error::Invalid(format!("expected [V, T, H, W, 3] frames, got {shape:?}")));
    }
    let v = shape[0];
    let per_view: usize = shape[1..].iter().product();
    let data = match v {
        0 => return Err(Error::Invalid("episode has no views".into())),
        1 => [frames.data(), frames.data()].concat(),
        _ => frames.data()[..2 * per_view].to_vec(),
    };
    let mut out_shape = shape.to_vec();
    out_shape[0] = 2;
    Tensor::new(out_shape, data)
}
