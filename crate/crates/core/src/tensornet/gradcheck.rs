//! Central finite-difference verification of analytic gradients.

use super::model::ModelWeights;
use super::network::{backward, forward, sample_bce, DropoutMasks, Mode};
use crate::error::{Error, Result};
use crate::signal_model::OccupancyVector;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst relative error between `analytic[i]` and `(loss(p + d e_i) - loss(p - d e_i)) / 2d`
/// over `indices`, with `d = delta * max(1, |p_i|)`. `params` is restored on return.
pub fn max_relative_error(
    params: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    delta: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = params[i];
        let d = delta * orig.abs().max(1.0);
        params[i] = orig + d;
        let up = loss(params);
        params[i] = orig - d;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * d);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Checks the network's backward pass against finite differences of the
/// single-sample loss. With `masks` the same dropout pattern is used for
/// every evaluation.
pub fn finite_difference_check(
    w: &ModelWeights<f64>,
    x: &Tensor<f64>,
    label: &OccupancyVector,
    delta: f64,
    indices: &[usize],
    masks: Option<&DropoutMasks>,
) -> Result<f64> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let count = w.param_count();
    if let Some(&bad) = indices.iter().find(|&&i| i >= count) {
        return Err(Error::invalid(format!(
            "parameter index {bad} out of range {count}"
        )));
    }
    let mode = masks.map_or(Mode::Eval, Mode::Train);
    let (_, cache) = forward(w, x, mode)?;
    let analytic = backward(w, &cache, label)?.flatten();

    let mut probe = w.clone();
    // Perturb a detached copy so pruned positions are not re-zeroed between evaluations.
    probe.clear_mask();
    let mut params: Vec<f64> = (0..count).map(|i| w.param(i)).collect();
    let mut failure = None;
    let worst = max_relative_error(&mut params, &analytic, indices, delta, |p| {
        for &i in indices {
            probe.set_param(i, p[i]);
        }
        match forward(&probe, x, mode) {
            Ok((probs, _)) => sample_bce(&probs, label),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}
