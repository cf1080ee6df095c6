//! Mini-batch SGD, offline training with early stopping and evaluation helpers.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{LabeledDataset, Sample};
use super::model::{init_weights, Gradients, ModelWeights, Scalar};
use super::network::{
    accumulate_backward, forward, mask_gradients, sample_bce, DropoutMasks, Mode, Scope,
};
use super::spec::WssNetSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<F> {
    /// Best-validation snapshot.
    pub weights: ModelWeights<F>,
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot, 0 if no epoch improved.
    pub best_epoch: usize,
}

/// Mean loss and mean gradient over `batch`. Dropout is active when `rng` is given.
pub fn batch_gradient<F: Scalar, R: Rng + ?Sized>(
    w: &ModelWeights<F>,
    batch: &[&Sample],
    scope: Scope,
    mut rng: Option<&mut R>,
) -> Result<(F, Gradients<F>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let weight = F::one() / F::from_usize(batch.len()).expect("batch size");
    let mut grads = Gradients::zeros(w.spec());
    let mut loss = F::zero();
    for sample in batch {
        let masks = rng
            .as_deref_mut()
            .map(|r| DropoutMasks::sample(w.spec(), r));
        let mode = masks.as_ref().map_or(Mode::Eval, Mode::Train);
        let (probs, cache) = forward(w, &sample.feature, mode)?;
        loss += sample_bce(&probs, &sample.label);
        accumulate_backward(w, &cache, &sample.label, weight, scope, &mut grads)?;
    }
    mask_gradients(w, &mut grads);
    Ok((loss * weight, grads))
}

/// `theta <- theta - lr * g` over `scope`; the prune mask is re-applied afterwards.
pub fn sgd_step<F: Scalar>(
    w: &mut ModelWeights<F>,
    g: &Gradients<F>,
    lr: F,
    scope: Scope,
) -> Result<()> {
    let reference = Gradients::<F>::zeros(w.spec());
    if reference
        .slices()
        .iter()
        .zip(g.slices())
        .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::invalid(
            "gradient structure does not match the weights",
        ));
    }
    let step = |dst: &mut [F], src: &[F]| dst.iter_mut().zip(src).for_each(|(d, &s)| *d -= lr * s);
    if scope == Scope::All {
        for (dst, src) in w.gf.slices_mut().into_iter().zip(g.gf.slices()) {
            step(dst, src);
        }
    }
    for (dst, src) in w.ds.slices_mut().into_iter().zip(g.ds.slices()) {
        step(dst, src);
    }
    w.enforce_mask();
    Ok(())
}

/// One shuffled pass of mini-batch SGD. Returns the mean training-mode loss.
pub fn train_epoch<F: Scalar, R: Rng + ?Sized>(
    w: &mut ModelWeights<F>,
    data: &LabeledDataset,
    lr: f64,
    batch_size: usize,
    scope: Scope,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let lr = F::from_f64_lossy(lr);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples()[i]).collect();
        let (loss, g) = batch_gradient(w, &batch, scope, Some(&mut *rng))?;
        sgd_step(w, &g, lr, scope)?;
        total += loss.to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Eval-mode loss over a whole dataset, averaged over its samples.
pub fn dataset_loss<F: Scalar>(w: &ModelWeights<F>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut total = 0.0;
    for s in data.iter() {
        let (p, _) = forward(w, &s.feature, Mode::Eval)?;
        total += sample_bce(&p, &s.label).to_f64_lossy();
    }
    Ok(total / data.len() as f64)
}

/// Freshly initialised weights trained with early stopping.
pub fn train_offline<F: Scalar, R: Rng + ?Sized>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    spec: &WssNetSpec,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport<F>> {
    let init = init_weights(spec, rng)?;
    train_from(init, train, val, config, rng)
}

/// Early-stopped SGD from `init`: stops once validation loss has failed to
/// improve for more than `patience` consecutive epochs and returns the best snapshot.
pub fn train_from<F: Scalar, R: Rng + ?Sized>(
    init: ModelWeights<F>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport<F>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "training and validation splits must be non-empty",
        ));
    }
    let initial_val_loss = dataset_loss(&init, val)?;
    let mut best = (initial_val_loss, init.clone(), 0);
    let mut w = init;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(
            &mut w,
            train,
            config.learning_rate,
            config.batch_size,
            Scope::All,
            rng,
        )?;
        let val_loss = dataset_loss(&w, val)?;
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, w.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }
    Ok(TrainReport {
        weights: best.1,
        initial_val_loss,
        history,
        best_epoch: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::OccupancyVector;
    use crate::tensor::Tensor;
    use crate::tensornet::spec::{DropoutRates, Padding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> WssNetSpec {
        WssNetSpec {
            subbands: 6,
            snapshots: 8,
            conv1_kernels: 4,
            conv2_kernels: 3,
            hidden_units: 8,
            padding: Padding::Valid,
            dropout: DropoutRates::NONE,
        }
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = Tensor::new(
            vec![6, 8, 2],
            (0..96).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        Sample {
            feature,
            label: OccupancyVector::from_bits(vec![true, false, false, true, false, true]),
        }
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let s = spec();
        let mut w: ModelWeights<f32> = init_weights(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = w.clone();
        sgd_step(&mut w, &Gradients::zeros(&s), 0.1, Scope::All).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn step_arithmetic_and_freeze() {
        let s = spec();
        let mut w: ModelWeights<f64> = init_weights(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        w.ds.output.bias[0] = 1.0;
        let mut g = Gradients::zeros(&s);
        g.ds.output.bias[0] = 2.0;
        g.gf.conv1.weight[0] = 5.0;
        let digest = w.gf_digest();
        sgd_step(&mut w, &g, 0.1, Scope::DsOnly).unwrap();
        assert!((w.ds.output.bias[0] - 0.8).abs() < 1e-15);
        assert_eq!(w.gf_digest(), digest);
        sgd_step(&mut w, &g, 0.1, Scope::All).unwrap();
        assert_ne!(w.gf_digest(), digest);
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let s = spec();
        let w: ModelWeights<f64> = init_weights(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = sample(3);
        let (l1, g1) = batch_gradient::<_, ChaCha8Rng>(&w, &[&x], Scope::All, None).unwrap();
        let (l2, g2) = batch_gradient::<_, ChaCha8Rng>(&w, &[&x, &x], Scope::All, None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_sample_loss_decreases() {
        let s = spec();
        let data = LabeledDataset::new(vec![sample(5); 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w: ModelWeights<f32> = init_weights(&s, &mut rng).unwrap();
        let initial = dataset_loss(&w, &data).unwrap();
        let mut prev = initial;
        for _ in 0..5 {
            train_epoch(&mut w, &data, 0.02, 4, Scope::All, &mut rng).unwrap();
            let now = dataset_loss(&w, &data).unwrap();
            assert!(now <= prev + 1e-6, "{now} > {prev}");
            prev = now;
        }
        assert!(prev < initial);
    }

    #[test]
    fn patience_zero_stops_at_first_stale_epoch() {
        let s = spec();
        let data = LabeledDataset::new((0..6).map(sample).collect()).unwrap();
        // A learning rate this large makes the validation loss blow up immediately.
        let cfg = TrainConfig {
            learning_rate: 50.0,
            batch_size: 3,
            max_epochs: 20,
            patience: 0,
        };
        let r: TrainReport<f32> =
            train_offline(&data, &data, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let first_stale = r
            .history
            .iter()
            .scan(r.initial_val_loss, |best, e| {
                let stale = e.val_loss >= *best;
                *best = best.min(e.val_loss);
                Some((e.epoch, stale))
            })
            .find(|(_, stale)| *stale)
            .map(|(epoch, _)| epoch)
            .unwrap();
        assert_eq!(r.history.len(), first_stale);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let s = spec();
        let data = LabeledDataset::new((0..6).map(sample).collect()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 2,
            max_epochs: 3,
            patience: 5,
        };
        let a: TrainReport<f32> =
            train_offline(&data, &data, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: TrainReport<f32> =
            train_offline(&data, &data, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let s = spec();
        let data = LabeledDataset::new(vec![sample(1)]).unwrap();
        let empty = LabeledDataset::default();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(train_offline::<f32, _>(&empty, &data, &s, &cfg, &mut rng).is_err());
        assert!(train_offline::<f32, _>(&data, &empty, &s, &cfg, &mut rng).is_err());
    }
}
