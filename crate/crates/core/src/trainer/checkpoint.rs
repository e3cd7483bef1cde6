//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, JSON
//! header, then named tensor records. Each record is a u32 name length,
//! the UTF-8 name, a u32 rank, u32 extents, and little-endian f32 data.
//! Records hold every model parameter (the frozen encoder included) followed
//! by the optimizer moments `adam.m.<name>` and `adam.v.<name>` of trainable
//! parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, StepMetrics, TrainConfig, Trainer};
use crate::data_synth::dataset::Reader;
use crate::data_synth::ActionNormalizer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"JEPACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub step: usize,
    pub normalizer: ActionNormalizer,
    /// Per-parameter optimizer update counts.
    pub optimizer_steps: Vec<u64>,
    pub history: Vec<StepMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let store = &tr.model.store;
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (prefix, moments) in [("adam.m.", &tr.optimizer.m), ("adam.v.", &tr.optimizer.v)] {
            for ((_, p), t) in store.iter().zip(moments) {
                if p.trainable {
                    tensors.push((format!("{prefix}{}", p.name), t.clone()));
                }
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config_hash: tr.config.hash(),
                config: tr.config.clone(),
                step: tr.step,
                normalizer: tr.normalizer.clone(),
                optimizer_steps: tr.optimizer.t.clone(),
                history: tr.history.clone(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        if header.config_hash != header.config.hash() {
            return Err(Error::format(path, "config hash does not match stored config"));
        }
        let mut tensors = Vec::new();
        while !r.at_end() {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            tensors.push((name, Tensor::new(shape, r.f32s(n)?)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn split(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        self.tensors.iter().cloned().partition(|(n, _)| !n.starts_with("adam."))
    }

    /// Rebuilds the model alone (for evaluation and probes).
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.header.config.model.clone(), self.header.config.seed)?;
        let (params, _) = self.split();
        model.store.load_values(&params)?;
        Ok(model)
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut tr = Trainer::new(self.header.config.clone())?;
        let (params, moments) = self.split();
        tr.model.store.load_values(&params)?;
        let mut opt = AdamW::new(&tr.model.store, tr.config.optimizer);
        if self.header.optimizer_steps.len() != tr.model.store.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        opt.t = self.header.optimizer_steps.clone();
        for (id, p) in tr.model.store.iter() {
            if !p.trainable {
                continue;
            }
            for (prefix, slot) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
                let key = format!("{prefix}{}", p.name);
                let (_, t) = moments
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Invalid(format!("{key} has the wrong shape")));
                }
                slot[id.index()] = t.clone();
            }
        }
        tr.optimizer = opt;
        tr.normalizer = self.header.normalizer;
        tr.step = self.header.step;
        tr.history = self.header.history;
        Ok(tr)
    }
}
