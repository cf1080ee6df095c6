use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::spec::{WssNetSpec, INPUT_CHANNELS, KERNEL};
use crate::error::{Error, Result};

/// Floating-point type the network is generic over (`f32` for training,
/// `f64` for gradient verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite cast")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    fn le_bytes(self) -> Vec<u8>;
}

impl Scalar for f32 {
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    fn le_bytes(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

fn cast_vec<F: Scalar, G: Scalar>(v: &[F]) -> Vec<G> {
    v.iter()
        .map(|&x| G::from_f64_lossy(x.to_f64_lossy()))
        .collect()
}

/// 3x3 convolution; weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            weight: vec![F::zero(); out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![F::zero(); out_channels],
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, KERNEL, KERNEL]
    }

    fn cast<G: Scalar>(&self) -> Conv2d<G> {
        Conv2d {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Fully connected layer; weights laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weight: vec![F::zero(); outputs * inputs],
            bias: vec![F::zero(); outputs],
        }
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.outputs, self.inputs]
    }

    fn cast<G: Scalar>(&self) -> Dense<G> {
        Dense {
            outputs: self.outputs,
            inputs: self.inputs,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// General-feature layers `{theta_1, theta_2}`: frozen during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralFeature<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
}

/// Domain-specific layers `{theta_3, theta_4}`: pruned, adapted and federated.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpecific<F> {
    pub hidden: Dense<F>,
    pub output: Dense<F>,
}

impl<F: Scalar> GeneralFeature<F> {
    pub fn zeros(spec: &WssNetSpec) -> Self {
        Self {
            conv1: Conv2d::zeros(spec.conv1_kernels, INPUT_CHANNELS),
            conv2: Conv2d::zeros(spec.conv2_kernels, spec.conv1_kernels),
        }
    }

    pub fn slices(&self) -> [&[F]; 4] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 4] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }

    pub fn cast<G: Scalar>(&self) -> GeneralFeature<G> {
        GeneralFeature {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
        }
    }
}

impl<F: Scalar> DomainSpecific<F> {
    pub fn zeros(spec: &WssNetSpec) -> Self {
        Self {
            hidden: Dense::zeros(spec.hidden_units, spec.flatten_len()),
            output: Dense::zeros(spec.outputs(), spec.hidden_units),
        }
    }

    pub fn slices(&self) -> [&[F]; 4] {
        [
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 4] {
        [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 4] {
        [
            self.hidden.weight_shape().to_vec(),
            vec![self.hidden.outputs],
            self.output.weight_shape().to_vec(),
            vec![self.output.outputs],
        ]
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.hidden.outputs == other.hidden.outputs
            && self.hidden.inputs == other.hidden.inputs
            && self.output.outputs == other.output.outputs
            && self.output.inputs == other.output.inputs
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn scale(&mut self, factor: F) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: F) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += factor * s);
        }
    }

    pub fn cast<G: Scalar>(&self) -> DomainSpecific<G> {
        DomainSpecific {
            hidden: self.hidden.cast(),
            output: self.output.cast(),
        }
    }
}

/// Keep-mask over the hidden-layer weight matrix (`theta_3`); `false` marks a pruned weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn new(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn all(len: usize) -> Self {
        Self {
            keep: vec![true; len],
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Zeroes every masked position of `values`.
    pub fn apply<F: Scalar>(&self, values: &mut [F]) {
        for (v, &k) in values.iter_mut().zip(&self.keep) {
            if !k {
                *v = F::zero();
            }
        }
    }
}

/// `Theta = {theta_1, theta_2, theta_3, theta_4}` with an optional prune mask on `theta_3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    spec: WssNetSpec,
    pub gf: GeneralFeature<F>,
    pub ds: DomainSpecific<F>,
    mask: Option<PruneMask>,
}

impl<F: Scalar> ModelWeights<F> {
    pub fn zeros(spec: &WssNetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            gf: GeneralFeature::zeros(spec),
            ds: DomainSpecific::zeros(spec),
            mask: None,
        })
    }

    /// Assembles weights from parts, checking every layer against `spec`.
    pub fn from_parts(
        spec: WssNetSpec,
        gf: GeneralFeature<F>,
        ds: DomainSpecific<F>,
        mask: Option<PruneMask>,
    ) -> Result<Self> {
        let reference = Self::zeros(&spec)?;
        let congruent =
            |a: [&[F]; 4], b: [&[F]; 4]| a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !congruent(gf.slices(), reference.gf.slices())
            || !congruent(ds.slices(), reference.ds.slices())
            || !ds.same_structure(&reference.ds)
            || gf.conv1.in_channels != INPUT_CHANNELS
            || gf.conv2.in_channels != spec.conv1_kernels
        {
            return Err(Error::invalid("layer shapes do not match the network spec"));
        }
        let mut w = Self {
            spec,
            gf,
            ds,
            mask: None,
        };
        if let Some(m) = mask {
            w.set_mask(m)?;
        }
        Ok(w)
    }

    pub fn spec(&self) -> &WssNetSpec {
        &self.spec
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    /// Installs a mask and zeroes the masked `theta_3` weights.
    pub fn set_mask(&mut self, mask: PruneMask) -> Result<()> {
        if mask.len() != self.ds.hidden.weight.len() {
            return Err(Error::invalid(format!(
                "mask covers {} weights, theta_3 has {}",
                mask.len(),
                self.ds.hidden.weight.len()
            )));
        }
        mask.apply(&mut self.ds.hidden.weight);
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    pub(crate) fn enforce_mask(&mut self) {
        if let Some(m) = &self.mask {
            m.apply(&mut self.ds.hidden.weight);
        }
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// All parameter tensors in canonical order:
    /// conv1 w/b, conv2 w/b, hidden w/b, output w/b.
    pub fn slices(&self) -> [&[F]; 8] {
        let [a, b, c, d] = self.gf.slices();
        let [e, f, g, h] = self.ds.slices();
        [a, b, c, d, e, f, g, h]
    }

    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let [e, f, g, h] = self.ds.shapes();
        [
            self.gf.conv1.weight_shape().to_vec(),
            vec![self.gf.conv1.out_channels],
            self.gf.conv2.weight_shape().to_vec(),
            vec![self.gf.conv2.out_channels],
            e,
            f,
            g,
            h,
        ]
    }

    /// Reads parameter `index` in the flattened canonical order.
    pub fn param(&self, index: usize) -> F {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_param(&mut self, index: usize, value: F) {
        let mut i = index;
        let [a, b, c, d] = self.gf.slices_mut();
        let [e, f, g, h] = self.ds.slices_mut();
        for s in [a, b, c, d, e, f, g, h] {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// SHA-256 over the little-endian bytes of the general-feature layers.
    pub fn gf_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in self.gf.slices() {
            for &v in s {
                h.update(v.le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        ModelWeights {
            spec: self.spec.clone(),
            gf: self.gf.cast(),
            ds: self.ds.cast(),
            mask: self.mask.clone(),
        }
    }

    /// Replaces the domain-specific layers, re-applying the mask.
    pub fn with_ds(&self, ds: DomainSpecific<F>) -> Result<Self> {
        if !ds.same_structure(&self.ds) {
            return Err(Error::invalid(
                "domain-specific layers have the wrong shape",
            ));
        }
        let mut w = Self {
            spec: self.spec.clone(),
            gf: self.gf.clone(),
            ds,
            mask: self.mask.clone(),
        };
        w.enforce_mask();
        Ok(w)
    }
}

/// Gradients congruent with [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub gf: GeneralFeature<F>,
    pub ds: DomainSpecific<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(spec: &WssNetSpec) -> Self {
        Self {
            gf: GeneralFeature::zeros(spec),
            ds: DomainSpecific::zeros(spec),
        }
    }

    pub fn slices(&self) -> [&[F]; 8] {
        let [a, b, c, d] = self.gf.slices();
        let [e, f, g, h] = self.ds.slices();
        [a, b, c, d, e, f, g, h]
    }

    fn slices_mut(&mut self) -> [&mut [F]; 8] {
        let [a, b, c, d] = self.gf.slices_mut();
        let [e, f, g, h] = self.ds.slices_mut();
        [a, b, c, d, e, f, g, h]
    }

    pub fn flatten(&self) -> Vec<F> {
        self.slices().concat()
    }

    pub fn scale(&mut self, factor: F) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self
            .slices()
            .iter()
            .zip(other.slices())
            .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::invalid("gradient structures differ"));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
        Ok(())
    }

    /// Restriction to the domain-specific layers.
    pub fn into_ds(self) -> DomainSpecific<F> {
        self.ds
    }
}

/// Fan-in scaled uniform initialisation, bound `sqrt(6 / fan_in)`, zero biases.
pub fn init_weights<F: Scalar, R: Rng + ?Sized>(
    spec: &WssNetSpec,
    rng: &mut R,
) -> Result<ModelWeights<F>> {
    let mut w = ModelWeights::zeros(spec)?;
    let mut fill = |values: &mut [F], fan_in: usize| {
        let bound = init_bound(fan_in);
        for v in values {
            *v = F::from_f64_lossy(rng.random_range(-bound..bound));
        }
    };
    fill(&mut w.gf.conv1.weight, INPUT_CHANNELS * KERNEL * KERNEL);
    fill(&mut w.gf.conv2.weight, spec.conv1_kernels * KERNEL * KERNEL);
    fill(&mut w.ds.hidden.weight, spec.flatten_len());
    fill(&mut w.ds.output.weight, spec.hidden_units);
    Ok(w)
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
