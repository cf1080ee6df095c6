//! Forward pass, fused sigmoid + BCE loss and exact backpropagation.
//!
//! Activations are kept in channel-major (CHW) order; the `L x N x 2` input
//! tensor is transposed on entry. ReLU and inverted dropout are fused: the
//! cached activation is `relu(z) * keep / (1 - p)`, so a positive cached
//! value implies the unit was both active and kept.

use num_traits::ToPrimitive;
use rand::Rng;

use super::model::{Conv2d, Dense, Gradients, ModelWeights, Scalar};
use super::spec::{WssNetSpec, INPUT_CHANNELS, KERNEL};
use crate::error::{Error, Result};
use crate::signal_model::OccupancyVector;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[eps, 1 - eps]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Which parameters a backward pass or update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    /// Only `{theta_3, theta_4}`; the convolutional layers stay frozen.
    DsOnly,
}

/// Keep-masks for the three hidden layers (`true` = unit kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMasks {
    pub conv1: Vec<bool>,
    pub conv2: Vec<bool>,
    pub hidden: Vec<bool>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(spec: &WssNetSpec, rng: &mut R) -> Self {
        let (h1, w1) = spec.conv1_out();
        let mut draw = |len: usize, p: f64| -> Vec<bool> {
            if p == 0.0 {
                vec![true; len]
            } else {
                (0..len).map(|_| !rng.random_bool(p)).collect()
            }
        };
        Self {
            conv1: draw(h1 * w1 * spec.conv1_kernels, spec.dropout.conv1),
            conv2: draw(spec.flatten_len(), spec.dropout.conv2),
            hidden: draw(spec.hidden_units, spec.dropout.hidden),
        }
    }

    pub fn keep_all(spec: &WssNetSpec) -> Self {
        let (h1, w1) = spec.conv1_out();
        Self {
            conv1: vec![true; h1 * w1 * spec.conv1_kernels],
            conv2: vec![true; spec.flatten_len()],
            hidden: vec![true; spec.hidden_units],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Deterministic inference, dropout disabled.
    Eval,
    /// Training with the given dropout masks.
    Train(&'a DropoutMasks),
}

/// Activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    spec: WssNetSpec,
    input: Vec<F>,
    act1: Vec<F>,
    act2: Vec<F>,
    hidden: Vec<F>,
    probs: Vec<F>,
    scales: [F; 3],
}

impl<F: Scalar> ForwardCache<F> {
    pub fn probabilities(&self) -> &[F] {
        &self.probs
    }
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn span(out_len: usize, in_len: usize, pad: usize, k: usize) -> (usize, usize) {
    // Output positions o with 0 <= o + k - pad < in_len.
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn conv_forward<F: Scalar>(
    layer: &Conv2d<F>,
    input: &[F],
    (h, w): (usize, usize),
    pad: usize,
    out: &mut [F],
    (oh, ow): (usize, usize),
) {
    let plane = oh * ow;
    for oc in 0..layer.out_channels {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = layer.bias[oc]);
        for ic in 0..layer.in_channels {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * layer.in_channels + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let (y_lo, y_hi) = span(oh, h, pad, ky);
                for kx in 0..KERNEL {
                    let wv = layer.weight[kbase + ky * KERNEL + kx];
                    let (x_lo, x_hi) = span(ow, w, pad, kx);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let src = &in_plane[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad];
                        let dst = &mut out_plane[y * ow + x_lo..y * ow + x_hi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Scalar>(
    layer: &Conv2d<F>,
    input: &[F],
    (h, w): (usize, usize),
    pad: usize,
    dout: &[F],
    (oh, ow): (usize, usize),
    grad: &mut Conv2d<F>,
    mut dinput: Option<&mut [F]>,
) {
    let plane = oh * ow;
    for oc in 0..layer.out_channels {
        let d_plane = &dout[oc * plane..(oc + 1) * plane];
        grad.bias[oc] += d_plane.iter().copied().sum::<F>();
        for ic in 0..layer.in_channels {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * layer.in_channels + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let (y_lo, y_hi) = span(oh, h, pad, ky);
                for kx in 0..KERNEL {
                    let (x_lo, x_hi) = span(ow, w, pad, kx);
                    let wv = layer.weight[kbase + ky * KERNEL + kx];
                    let mut acc = F::zero();
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let src_range = iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad;
                        let d_row = &d_plane[y * ow + x_lo..y * ow + x_hi];
                        acc += dot(d_row, &in_plane[src_range.clone()]);
                        if let Some(din) = dinput.as_deref_mut() {
                            let din_row = &mut din[ic * h * w..(ic + 1) * h * w][src_range];
                            for (di, &d) in din_row.iter_mut().zip(d_row) {
                                *di += wv * d;
                            }
                        }
                    }
                    grad.weight[kbase + ky * KERNEL + kx] += acc;
                }
            }
        }
    }
}

/// Inner product with eight independent partial sums so the loop vectorises.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

fn dense_forward<F: Scalar>(layer: &Dense<F>, input: &[F], out: &mut [F]) {
    for (o, v) in out.iter_mut().enumerate() {
        let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
        *v = layer.bias[o] + dot(row, input);
    }
}

fn relu_dropout<F: Scalar>(values: &mut [F], keep: Option<&[bool]>, scale: F) {
    match keep {
        None => values.iter_mut().for_each(|v| *v = v.max(F::zero())),
        Some(keep) => values.iter_mut().zip(keep).for_each(|(v, &k)| {
            *v = if k && *v > F::zero() {
                *v * scale
            } else {
                F::zero()
            };
        }),
    }
}

fn check_masks(spec: &WssNetSpec, masks: &DropoutMasks) -> Result<()> {
    let reference = DropoutMasks::keep_all(spec);
    if masks.conv1.len() != reference.conv1.len()
        || masks.conv2.len() != reference.conv2.len()
        || masks.hidden.len() != reference.hidden.len()
    {
        return Err(Error::invalid(
            "dropout masks do not match the network spec",
        ));
    }
    Ok(())
}

/// Runs the network on one `L x N x 2` input. Returns the per-sub-band
/// occupancy probabilities and the cache needed by [`backward`].
pub fn forward<F: Scalar, X: Copy + ToPrimitive>(
    w: &ModelWeights<F>,
    x: &Tensor<X>,
    mode: Mode<'_>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let spec = w.spec();
    if x.shape() != spec.input_shape() {
        return Err(Error::invalid(format!(
            "input shape {:?} does not match {:?}",
            x.shape(),
            spec.input_shape()
        )));
    }
    let (h, wd) = (spec.subbands, spec.snapshots);
    let mut input = vec![F::zero(); INPUT_CHANNELS * h * wd];
    for (i, v) in x.data().iter().enumerate() {
        let c = i % INPUT_CHANNELS;
        let pix = i / INPUT_CHANNELS;
        input[c * h * wd + pix] = F::from_f64_lossy(
            v.to_f64()
                .ok_or_else(|| Error::invalid("non-numeric input"))?,
        );
    }

    let keep = match mode {
        Mode::Eval => None,
        Mode::Train(m) => {
            check_masks(spec, m)?;
            Some(m)
        }
    };
    let rates = spec.dropout.as_array();
    let scales = match keep {
        None => [F::one(); 3],
        Some(_) => rates.map(|p| F::from_f64_lossy(1.0 / (1.0 - p))),
    };

    let pad = spec.padding.amount();
    let d1 = spec.conv1_out();
    let d2 = spec.conv2_out();
    let mut act1 = vec![F::zero(); spec.conv1_kernels * d1.0 * d1.1];
    conv_forward(&w.gf.conv1, &input, (h, wd), pad, &mut act1, d1);
    relu_dropout(&mut act1, keep.map(|m| m.conv1.as_slice()), scales[0]);

    let mut act2 = vec![F::zero(); spec.flatten_len()];
    conv_forward(&w.gf.conv2, &act1, d1, pad, &mut act2, d2);
    relu_dropout(&mut act2, keep.map(|m| m.conv2.as_slice()), scales[1]);

    let mut hidden = vec![F::zero(); spec.hidden_units];
    dense_forward(&w.ds.hidden, &act2, &mut hidden);
    relu_dropout(&mut hidden, keep.map(|m| m.hidden.as_slice()), scales[2]);

    let mut probs = vec![F::zero(); spec.outputs()];
    dense_forward(&w.ds.output, &hidden, &mut probs);
    probs.iter_mut().for_each(|v| *v = sigmoid(*v));

    let cache = ForwardCache {
        spec: spec.clone(),
        input,
        act1,
        act2,
        hidden,
        probs: probs.clone(),
        scales,
    };
    Ok((probs, cache))
}

/// Per-sample loss `-sum_l [o_l ln p_l + (1 - o_l) ln(1 - p_l)]`, not divided by `L`.
pub fn sample_bce<F: Scalar>(probs: &[F], label: &OccupancyVector) -> F {
    let eps = F::from_f64_lossy(BCE_EPS);
    let hi = F::one() - eps;
    probs
        .iter()
        .zip(label.bits())
        .map(|(&p, &o)| {
            let p = p.max(eps).min(hi);
            if o {
                -p.ln()
            } else {
                -(F::one() - p).ln()
            }
        })
        .sum()
}

/// Binary cross-entropy summed over sub-bands and averaged over samples.
pub fn bce_loss<F: Scalar>(predictions: &[Vec<F>], labels: &[OccupancyVector]) -> Result<F> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = F::zero();
    for (p, o) in predictions.iter().zip(labels) {
        if p.len() != o.len() {
            return Err(Error::invalid("prediction and label lengths differ"));
        }
        total += sample_bce(p, o);
    }
    Ok(total / F::from_usize(predictions.len()).expect("count"))
}

/// Accumulates `weight * d(sample loss)/d(theta)` into `grads`.
pub(crate) fn accumulate_backward<F: Scalar>(
    w: &ModelWeights<F>,
    cache: &ForwardCache<F>,
    label: &OccupancyVector,
    weight: F,
    scope: Scope,
    grads: &mut Gradients<F>,
) -> Result<()> {
    let spec = w.spec();
    if &cache.spec != spec {
        return Err(Error::InvalidState(
            "forward cache was produced by a different network".into(),
        ));
    }
    if label.len() != spec.outputs() {
        return Err(Error::invalid(format!(
            "label length {} does not match L = {}",
            label.len(),
            spec.outputs()
        )));
    }

    // Output layer: d loss / d logit = p - o for sigmoid + BCE.
    let dz4: Vec<F> = cache
        .probs
        .iter()
        .zip(label.bits())
        .map(|(&p, &o)| weight * (p - if o { F::one() } else { F::zero() }))
        .collect();
    let out = &w.ds.output;
    let g_out = &mut grads.ds.output;
    let mut dh = vec![F::zero(); out.inputs];
    for (o, &d) in dz4.iter().enumerate() {
        g_out.bias[o] += d;
        let row = o * out.inputs..(o + 1) * out.inputs;
        for ((g, &a), (dhj, &wv)) in g_out.weight[row.clone()]
            .iter_mut()
            .zip(&cache.hidden)
            .zip(dh.iter_mut().zip(&out.weight[row]))
        {
            *g += d * a;
            *dhj += wv * d;
        }
    }

    // Hidden layer.
    let hid = &w.ds.hidden;
    let dz3: Vec<F> = dh
        .iter()
        .zip(&cache.hidden)
        .map(|(&d, &a)| {
            if a > F::zero() {
                d * cache.scales[2]
            } else {
                F::zero()
            }
        })
        .collect();
    let g_hid = &mut grads.ds.hidden;
    let mut dflat = match scope {
        Scope::All => Some(vec![F::zero(); hid.inputs]),
        Scope::DsOnly => None,
    };
    for (j, &d) in dz3.iter().enumerate() {
        if d == F::zero() {
            continue;
        }
        g_hid.bias[j] += d;
        let row = j * hid.inputs..(j + 1) * hid.inputs;
        for (g, &a) in g_hid.weight[row.clone()].iter_mut().zip(&cache.act2) {
            *g += d * a;
        }
        if let Some(df) = dflat.as_mut() {
            for (dfi, &wv) in df.iter_mut().zip(&hid.weight[row]) {
                *dfi += wv * d;
            }
        }
    }
    let Some(dflat) = dflat else {
        return Ok(());
    };

    // Convolutions.
    let pad = spec.padding.amount();
    let d1 = spec.conv1_out();
    let d2 = spec.conv2_out();
    let dz2: Vec<F> = dflat
        .iter()
        .zip(&cache.act2)
        .map(|(&d, &a)| {
            if a > F::zero() {
                d * cache.scales[1]
            } else {
                F::zero()
            }
        })
        .collect();
    let mut dact1 = vec![F::zero(); cache.act1.len()];
    conv_backward(
        &w.gf.conv2,
        &cache.act1,
        d1,
        pad,
        &dz2,
        d2,
        &mut grads.gf.conv2,
        Some(&mut dact1),
    );
    let dz1: Vec<F> = dact1
        .iter()
        .zip(&cache.act1)
        .map(|(&d, &a)| {
            if a > F::zero() {
                d * cache.scales[0]
            } else {
                F::zero()
            }
        })
        .collect();
    conv_backward(
        &w.gf.conv1,
        &cache.input,
        (spec.subbands, spec.snapshots),
        pad,
        &dz1,
        d1,
        &mut grads.gf.conv1,
        None,
    );
    Ok(())
}

/// Zeroes gradient entries at pruned `theta_3` positions.
pub(crate) fn mask_gradients<F: Scalar>(w: &ModelWeights<F>, grads: &mut Gradients<F>) {
    if let Some(m) = w.mask() {
        m.apply(&mut grads.ds.hidden.weight);
    }
}

/// Exact gradient of the single-sample loss with respect to every parameter.
pub fn backward<F: Scalar>(
    w: &ModelWeights<F>,
    cache: &ForwardCache<F>,
    label: &OccupancyVector,
) -> Result<Gradients<F>> {
    let mut grads = Gradients::zeros(w.spec());
    accumulate_backward(w, cache, label, F::one(), Scope::All, &mut grads)?;
    mask_gradients(w, &mut grads);
    Ok(grads)
}
