//! Latent-token attention over the `t₀` image patches, with ground-truth
//! object masks from the renderer for scoring.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSequence;
use crate::config::VIEWS;
use crate::data_synth::render::{render_with_labels, Label};
use crate::data_synth::{EnvState, NuisanceConfig, StepSeed};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Graph;

/// Attention of one latent replica over the image patches, renormalized
/// over image columns and averaged over heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAttention {
    pub step: usize,
    pub replica: usize,
    /// `[V · grid · grid]`, view-major then row-major.
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub layer: usize,
    /// Patches per image side.
    pub grid: usize,
    pub views: usize,
    pub latents: Vec<LatentAttention>,
}

pub fn latent_attention(model: &Model, seq: &BackboneSequence, layer: usize) -> Result<AttentionExport> {
    let cfg = &model.config;
    let layers = cfg.backbone.layers;
    if layer >= layers {
        return Err(Error::Invalid(format!("layer {layer} out of range; backbone has {layers}")));
    }
    let mut g = Graph::new(&model.store);
    let out = model.backbone.forward(&mut g, seq)?;
    let (probs, heads) = g
        .attention_probs(out.attn[layer])
        .ok_or_else(|| Error::Invalid("attention node carries no weights".into()))?;
    let n = seq.len();
    let images = seq.image_patches.rows();
    let grid = cfg.image_size / cfg.backbone_patch;
    let mut latents = Vec::with_capacity(seq.horizon * seq.k);
    for i in 0..seq.horizon * seq.k {
        let row = seq.latent_offset() + i;
        let mut w = vec![0.0f32; images];
        for h in 0..heads {
            let base = (h * n + row) * n;
            for (c, x) in w.iter_mut().enumerate() {
                *x += probs[base + c] / heads as f32;
            }
        }
        let total: f32 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        latents.push(LatentAttention {
            step: i / seq.k,
            replica: i % seq.k,
            weights: w,
        });
    }
    Ok(AttentionExport {
        layer,
        grid,
        views: VIEWS,
        latents,
    })
}

impl AttentionExport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,replica,view,row,col,weight\n");
        let per = self.grid * self.grid;
        for l in &self.latents {
            for (j, w) in l.weights.iter().enumerate() {
                let (v, p) = (j / per, j % per);
                s.push_str(&format!("{},{},{},{},{},{}\n", l.step, l.replica, v, p / self.grid, p % self.grid, w));
            }
        }
        s
    }

    /// One heatmap row per latent replica, one panel per view.
    pub fn to_svg(&self) -> String {
        let cell = 12usize;
        let gap = cell;
        let panel = self.grid * cell;
        let label_w = 70;
        let width = label_w + self.views * (panel + gap);
        let height = 20 + self.latents.len() * (panel + gap);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"10\">\n"
        );
        s.push_str(&format!("<text x=\"4\" y=\"12\">layer {}</text>\n", self.layer));
        let per = self.grid * self.grid;
        for (li, l) in self.latents.iter().enumerate() {
            let y0 = 20 + li * (panel + gap);
            s.push_str(&format!(
                "<text x=\"4\" y=\"{}\">t{} k{}</text>\n",
                y0 + panel / 2,
                l.step,
                l.replica
            ));
            let peak = l.weights.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
            for (j, w) in l.weights.iter().enumerate() {
                let (v, p) = (j / per, j % per);
                let x = label_w + v * (panel + gap) + (p % self.grid) * cell;
                let y = y0 + (p / self.grid) * cell;
                let shade = 255 - (w / peak * 255.0).round().clamp(0.0, 255.0) as u8;
                s.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb(255,{shade},{shade})\"/>\n"
                ));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// What a patch shows, from the renderer's per-pixel labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchClass {
    /// Covers part of the target object or the gripper.
    Moving,
    /// Background pixels only.
    Background,
    Other,
}

/// Class of every patch of the `t₀` frames, view-major.
pub fn patch_classes(
    state: &EnvState,
    nuisance: &NuisanceConfig,
    nuisance_seed: u64,
    size: usize,
    patch: usize,
) -> Vec<PatchClass> {
    let grid = size / patch;
    let seed = StepSeed {
        episode: nuisance_seed,
        tick: 0,
    };
    let mut out = Vec::with_capacity(VIEWS * grid * grid);
    for v in 0..VIEWS {
        let (_, labels) = render_with_labels(state, v, nuisance, seed, size);
        for pr in 0..grid {
            for pc in 0..grid {
                let mut moving = false;
                let mut background = true;
                for r in pr * patch..(pr + 1) * patch {
                    for c in pc * patch..(pc + 1) * patch {
                        match labels[r * size + c] {
                            Label::Gripper => moving = true,
                            Label::Object(i) if i == state.target_object => moving = true,
                            Label::Background => continue,
                            _ => {}
                        }
                        background = false;
                    }
                }
                out.push(if moving {
                    PatchClass::Moving
                } else if background {
                    PatchClass::Background
                } else {
                    PatchClass::Other
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassSummary {
    /// Mean attention per moving-object patch.
    pub moving: f64,
    /// Mean attention per background patch.
    pub background: f64,
    pub moving_patches: usize,
    pub background_patches: usize,
}

/// Per-patch attention averaged over replicas and split by class. `None`
/// when either class has no patches.
pub fn mass_by_class(export: &AttentionExport, classes: &[PatchClass]) -> Option<MassSummary> {
    let mut mean = vec![0.0f64; classes.len()];
    for l in &export.latents {
        for (m, w) in mean.iter_mut().zip(&l.weights) {
            *m += *w as f64 / export.latents.len() as f64;
        }
    }
    let avg = |class| {
        let xs: Vec<f64> = mean.iter().zip(classes).filter(|(_, c)| **c == class).map(|(m, _)| *m).collect();
        (!xs.is_empty()).then(|| (xs.iter().sum::<f64>() / xs.len() as f64, xs.len()))
    };
    let (moving, mp) = avg(PatchClass::Moving)?;
    let (background, bp) = avg(PatchClass::Background)?;
    Some(MassSummary {
        moving,
        background,
        moving_patches: mp,
        background_patches: bp,
    })
}
