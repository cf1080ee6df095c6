//! Magnitude pruning of the hidden fully connected layer (`theta_3`).
//!
//! The threshold is the `ceil(kappa N)`-th smallest absolute weight (1-based)
//! and every weight with magnitude strictly below it is zeroed, so with
//! distinct magnitudes exactly `ceil(kappa N) - 1` weights are removed.
//! Biases are never pruned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{
    dataset_loss, train_epoch, LabeledDataset, ModelWeights, PruneMask, Scalar, Scope,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kappa: f64,
    /// Threshold `gamma` on absolute weight value.
    pub gamma: f64,
    pub zeroed_count: usize,
    pub total_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 32,
            epochs: 5,
        }
    }
}

/// `ceil(kappa n)`, snapping products within rounding noise of an integer.
pub fn threshold_rank(kappa: f64, n: usize) -> usize {
    let x = kappa * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `gamma = eta[ceil(kappa N)]` where `eta` holds the ascending absolute values (1-based).
pub fn pruning_threshold<F: Scalar>(weights: &[F], kappa: f64) -> Result<F> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid(format!(
            "pruning ratio {kappa} outside (0, 1)"
        )));
    }
    if weights.is_empty() {
        return Err(Error::invalid("cannot prune an empty weight vector"));
    }
    let mut eta: Vec<F> = weights.iter().map(|w| w.abs()).collect();
    eta.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = threshold_rank(kappa, eta.len()).clamp(1, eta.len());
    Ok(eta[rank - 1])
}

/// Keeps weights with `|w| >= gamma` and zeroes the rest.
pub fn apply_pruning<F: Scalar>(weights: &[F], gamma: F) -> (Vec<F>, PruneMask) {
    let keep: Vec<bool> = weights.iter().map(|w| w.abs() >= gamma).collect();
    let pruned = weights
        .iter()
        .zip(&keep)
        .map(|(&w, &k)| if k { w } else { F::zero() })
        .collect();
    (pruned, PruneMask::new(keep))
}

/// Prunes `theta_3` in place and installs the resulting mask. An existing mask
/// is merged so previously pruned weights stay pruned.
pub fn prune_model<F: Scalar>(w: &mut ModelWeights<F>, kappa: f64) -> Result<PruneReport> {
    let gamma = pruning_threshold(&w.ds.hidden.weight, kappa)?;
    let (_, mask) = apply_pruning(&w.ds.hidden.weight, gamma);
    let keep: Vec<bool> = match w.mask() {
        Some(old) => mask
            .keep()
            .iter()
            .zip(old.keep())
            .map(|(&a, &b)| a && b)
            .collect(),
        None => mask.keep().to_vec(),
    };
    let mask = PruneMask::new(keep);
    let report = PruneReport {
        kappa,
        gamma: gamma.to_f64_lossy(),
        zeroed_count: mask.pruned_count(),
        total_count: mask.len(),
    };
    w.set_mask(mask)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FineTuneReport {
    pub epoch_losses: Vec<f64>,
}

/// Retrains all layers for a fixed number of epochs with the mask held.
pub fn fine_tune<F: Scalar, R: Rng + ?Sized>(
    w: &mut ModelWeights<F>,
    data: &LabeledDataset,
    config: &FineTuneConfig,
    rng: &mut R,
) -> Result<FineTuneReport> {
    if w.mask().is_none() {
        return Err(Error::InvalidState(
            "fine-tuning requires a pruned model".into(),
        ));
    }
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        epoch_losses.push(train_epoch(
            w,
            data,
            config.learning_rate,
            config.batch_size,
            Scope::All,
            rng,
        )?);
    }
    Ok(FineTuneReport { epoch_losses })
}

/// Validation loss before and after fine-tuning a freshly pruned model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub report: PruneReport,
    pub val_loss_pruned: f64,
    pub val_loss_tuned: f64,
}

/// Prune with ratio `kappa`, then fine-tune on `train`.
pub fn prune_and_fine_tune<F: Scalar, R: Rng + ?Sized>(
    w: &mut ModelWeights<F>,
    kappa: f64,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &FineTuneConfig,
    rng: &mut R,
) -> Result<PruneOutcome> {
    let report = prune_model(w, kappa)?;
    let val_loss_pruned = dataset_loss(w, val)?;
    fine_tune(w, train, config, rng)?;
    let val_loss_tuned = dataset_loss(w, val)?;
    Ok(PruneOutcome {
        report,
        val_loss_pruned,
        val_loss_tuned,
    })
}
