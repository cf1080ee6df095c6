//! Federated adaptation of the domain-specific layers across secondary users.
//!
//! Each round the server broadcasts `Theta^t`, every SU runs local SGD on
//! `Theta_ds` with `Theta_gf` frozen and uploads the sum of its raw batch
//! gradients, and the server takes one size-weighted step:
//! `Theta_ds <- Theta_ds - alpha * sum_i (|D_i| / N_ad) G_i`.

mod message;
mod transport;

use std::time::Duration;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::seeded_rng;
use crate::tensornet::{
    batch_gradient, sgd_step, DomainSpecific, LabeledDataset, ModelWeights, Sample, Scalar, Scope,
};

pub use message::{
    deserialize_message, serialize_message, GradientUpload, Message, ModelBroadcast,
};
pub use transport::{InProcessTransport, SocketTransport, Transport};

/// Hyper-parameters an SU needs for `LocalTraining`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    /// `E`.
    pub epochs: usize,
    /// `b`.
    pub batch_size: usize,
    /// `alpha`.
    pub learning_rate: f64,
    /// Base seed; SU `i` in round `t` draws from a stream derived from `(seed, i, t)`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtlConfig {
    /// `M`.
    pub rounds: usize,
    pub local: LocalConfig,
    /// Aggregation step size; `local.learning_rate` when absent.
    pub server_learning_rate: Option<f64>,
    pub timeout: Duration,
    /// Extra attempts after a failed round.
    pub retries: usize,
}

impl FtlConfig {
    pub fn server_rate(&self) -> f64 {
        self.server_learning_rate
            .unwrap_or(self.local.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local.epochs == 0 || self.local.batch_size == 0 {
            return Err(Error::invalid(
                "rounds, local epochs and batch size must be positive",
            ));
        }
        if u32::try_from(self.rounds).is_err() {
            return Err(Error::invalid("round count exceeds u32"));
        }
        if !(self.local.learning_rate >= 0.0 && self.server_rate() >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// One SU's private adaptation set.
#[derive(Debug, Clone)]
pub struct SecondaryUser {
    pub id: u32,
    pub data: LabeledDataset,
}

/// RNG stream used by SU `su_id` in `round`.
pub fn local_rng(seed: u64, su_id: u32, round: u32) -> ChaCha8Rng {
    seeded_rng(
        seed,
        "ftl-local",
        (u64::from(su_id) << 32) | u64::from(round),
    )
}

/// `LocalTraining`: `E` shuffled epochs of mini-batch SGD on `Theta_ds`, accumulating
/// each raw batch gradient before the step it drives.
pub fn local_training<F: Scalar, R: Rng + ?Sized>(
    su_id: u32,
    global: &ModelBroadcast<F>,
    data: &LabeledDataset,
    config: &LocalConfig,
    rng: &mut R,
) -> Result<GradientUpload<F>> {
    if data.is_empty() {
        return Err(Error::invalid(format!(
            "SU {su_id} has no adaptation samples"
        )));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid(
            "local epochs and batch size must be positive",
        ));
    }
    let mut local = global.weights.clone();
    let mut accumulated = DomainSpecific::zeros(local.spec());
    let lr = F::from_f64_lossy(config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples()[i]).collect();
            let (_, g) = batch_gradient(&local, &batch, Scope::DsOnly, Some(&mut *rng))?;
            accumulated.add_scaled(&g.ds, F::one());
            sgd_step(&mut local, &g, lr, Scope::DsOnly)?;
        }
    }
    Ok(GradientUpload {
        round: global.round,
        su_id,
        sample_count: data.len() as u64,
        gradient: accumulated,
    })
}

/// `|D_i| / N_ad` per upload, after checking the integer sizes sum exactly.
pub fn aggregation_weights(counts: &[u64]) -> Result<Vec<f64>> {
    let total = counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| Error::ProtocolViolation("sample counts overflow".into()))?;
    if total == 0 {
        return Err(Error::ProtocolViolation("N_ad is zero".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Server update for round `round`. Uploads are reduced in ascending SU-id order.
pub fn aggregate<F: Scalar>(
    global: &ModelWeights<F>,
    round: u32,
    uploads: &[GradientUpload<F>],
    alpha: f64,
) -> Result<ModelWeights<F>> {
    if uploads.is_empty() {
        return Err(Error::ProtocolViolation(format!(
            "no uploads for round {round}"
        )));
    }
    let mut sorted: Vec<&GradientUpload<F>> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.su_id);
    for u in &sorted {
        if u.round != round {
            return Err(Error::ProtocolViolation(format!(
                "SU {} uploaded for round {}, expected {round}",
                u.su_id, u.round
            )));
        }
        if !u.gradient.same_structure(&global.ds) {
            return Err(Error::ProtocolViolation(format!(
                "SU {} gradient has the wrong shape",
                u.su_id
            )));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[0].su_id == w[1].su_id) {
        return Err(Error::ProtocolViolation(format!(
            "duplicate upload from SU {}",
            w[0].su_id
        )));
    }
    let counts: Vec<u64> = sorted.iter().map(|u| u.sample_count).collect();
    let weights = aggregation_weights(&counts)?;
    let mut acc = DomainSpecific::zeros(global.spec());
    for (u, &wt) in sorted.iter().zip(&weights) {
        acc.add_scaled(&u.gradient, F::from_f64_lossy(wt));
    }
    let mut ds = global.ds.clone();
    ds.add_scaled(&acc, -F::from_f64_lossy(alpha));
    global.with_ds(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Attempts used, 1 when the first try succeeded.
    pub attempts: usize,
    pub total_samples: u64,
}

#[derive(Debug, Clone)]
pub struct FtlReport {
    pub weights: ModelWeights<f32>,
    pub rounds: Vec<RoundRecord>,
}

/// Runs federated rounds over `transport`. `Theta_gf` is never modified.
pub fn run_ftl<T: Transport + ?Sized>(
    config: &FtlConfig,
    init: &ModelWeights<f32>,
    transport: &mut T,
) -> Result<FtlReport> {
    config.validate()?;
    let mut ids = transport.su_ids();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::invalid("federation needs at least one SU"));
    }
    let gf_digest = init.gf_digest();
    let mut global = init.clone();
    let mut records = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds as u32 {
        let broadcast = ModelBroadcast {
            round: t,
            weights: global.clone(),
        };
        let mut attempt = 0;
        let uploads = loop {
            attempt += 1;
            match transport.exchange(&broadcast, config.timeout) {
                Ok(u) => break u,
                Err(Error::Transport(msg)) if attempt <= config.retries => {
                    warn!("round {t} attempt {attempt} failed: {msg}; retrying");
                }
                Err(e) => return Err(e),
            }
        };
        let mut got: Vec<u32> = uploads.iter().map(|u| u.su_id).collect();
        got.sort_unstable();
        if got != ids {
            return Err(Error::ProtocolViolation(format!(
                "round {t}: uploads from {got:?}, expected {ids:?}"
            )));
        }
        global = aggregate(&global, t, &uploads, config.server_rate())?;
        debug_assert_eq!(global.gf_digest(), gf_digest);
        let total_samples = uploads.iter().map(|u| u.sample_count).sum();
        info!(
            "round {t} aggregated {} uploads ({total_samples} samples)",
            uploads.len()
        );
        records.push(RoundRecord {
            round: t,
            attempts: attempt,
            total_samples,
        });
    }
    if global.gf_digest() != gf_digest {
        return Err(Error::InvalidState(
            "general-feature layers changed during federation".into(),
        ));
    }
    Ok(FtlReport {
        weights: global,
        rounds: records,
    })
}
