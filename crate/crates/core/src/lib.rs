//! Leakage-free latent world-model pretraining with a flow-matching
//! action head, at desk scale.
//!
//! The policy backbone sees only the first frame of each window plus the
//! instruction; future frames are encoded by a frozen target encoder and
//! used purely as world-model regression targets.

pub mod action_head;
pub mod attention;
pub mod backbone;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod plot;
pub mod probe;
pub mod rng;
pub mod target_encoder;
pub mod trainer;
pub mod world_model;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use numerics::{AttnMask, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
