//! Central-difference gradient verification.

use serde::Serialize;

use super::encoder::Encoder;
use super::layers::{BatchNorm1d, Linear};
use super::ParamTensor;
use crate::error::Result;
use crate::rng;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so that entries whose true gradient is zero are judged on an
/// absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

pub trait HasParameters {
    fn parameters_mut(&mut self) -> Vec<&mut ParamTensor>;
}

impl HasParameters for Encoder {
    fn parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        Encoder::parameters_mut(self)
    }
}

impl HasParameters for Linear {
    fn parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl HasParameters for BatchNorm1d {
    fn parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Loose tensors, e.g. embeddings treated as inputs to a loss.
#[derive(Debug, Clone, Default)]
pub struct ParamSet(pub Vec<ParamTensor>);

impl HasParameters for ParamSet {
    fn parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.0.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against `(L(p + h) - L(p - h)) / 2h`.
///
/// `loss_fn(model, true)` must zero the gradients, evaluate the loss and
/// fill every parameter gradient; `loss_fn(model, false)` only evaluates.
/// It must be deterministic (fixed dropout masks). With
/// `max_entries_per_tensor = Some(m)`, at most `m` entries per tensor are
/// probed, chosen uniformly with a fixed seed.
pub fn finite_difference_check<M, F>(
    model: &mut M,
    mut loss_fn: F,
    h: f64,
    tolerance: f64,
    max_entries_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    M: HasParameters,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    loss_fn(model, true)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .parameters_mut()
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut pick_rng = rng::seeded(0, rng::stream::GRADCHECK);
    let mut tensors = Vec::with_capacity(analytic.len());
    for (t, (name, grads)) in analytic.iter().enumerate() {
        let mut entries: Vec<usize> = (0..grads.len()).collect();
        if let Some(m) = max_entries_per_tensor {
            if m < entries.len() {
                rng::choose_prefix(&mut pick_rng, &mut entries, m);
                entries.truncate(m);
                entries.sort_unstable();
            }
        }
        let mut check = TensorCheck {
            name: name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in entries {
            let original = model.parameters_mut()[t].values[i];
            model.parameters_mut()[t].values[i] = original + h;
            let plus = loss_fn(model, false)?;
            model.parameters_mut()[t].values[i] = original - h;
            let minus = loss_fn(model, false)?;
            model.parameters_mut()[t].values[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            check.max_abs_error = check.max_abs_error.max((grads[i] - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(grads[i], numeric));
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        step: h,
        tolerance,
        tensors,
    })
}
