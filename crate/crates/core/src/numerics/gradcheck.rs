//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only evaluates forward losses; it shares no code with the
//! backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Parameter, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_small: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index, analytic, numeric)` per checked entry.
    pub entries: Vec<(String, usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f32,
    /// Entries whose analytic gradient is below this magnitude are skipped.
    pub min_abs_grad: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 20,
            step: 1e-3,
            min_abs_grad: 1e-6,
            seed: 0,
        }
    }
}

/// Shorthand for [`check_filtered`] over every trainable parameter.
pub fn check<F>(store: &mut ParamStore, loss_fn: F, samples: usize, step: f32, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let opts = GradCheckOptions {
        samples,
        step,
        seed,
        ..Default::default()
    };
    check_filtered(store, loss_fn, |p| p.trainable, &opts)
}

/// Compares backward gradients against central differences on randomly
/// drawn scalar entries of the parameters accepted by `filter`.
pub fn check_filtered<F, P>(
    store: &mut ParamStore,
    loss_fn: F,
    filter: P,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    P: Fn(&Parameter) -> bool,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let candidates: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && filter(p))
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    let mut report = GradCheckReport::default();
    if candidates.is_empty() {
        return Ok(report);
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).data()[0] as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let max_attempts = opts.samples * 200;
    let mut attempts = 0;
    while report.checked < opts.samples && attempts < max_attempts {
        attempts += 1;
        let (id, n) = candidates[rng.gen_range(0..candidates.len())];
        let idx = rng.gen_range(0..n);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[idx] as f64);
        if analytic.abs() <= opts.min_abs_grad {
            report.skipped_small += 1;
            continue;
        }
        let orig = store.value(id).data()[idx];
        store.get_mut(id).value.data_mut()[idx] = orig + opts.step;
        let up = eval(store)?;
        store.get_mut(id).value.data_mut()[idx] = orig - opts.step;
        let down = eval(store)?;
        store.get_mut(id).value.data_mut()[idx] = orig;
        // effective step after f32 rounding of the perturbed value
        let h = ((orig + opts.step) as f64 - (orig - opts.step) as f64) / 2.0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
        report
            .entries
            .push((store.get(id).name.clone(), idx, analytic, numeric));
    }
    Ok(report)
}
