//! Multicoset sub-Nyquist front end.
//!
//! `P` cosets each sample `x(t)` at rate `1/(LT)` with delay `c_p T`. After a
//! per-coset DFT and phase correction the coset spectra satisfy `Y = A X`,
//! where column `l` of `A` maps sub-band `l` onto the aliased coset spectra.
//! `X` is recovered with the pseudo-inverse and then phase-normalised.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal_model::{self, PuPlacement, ScenarioConfig};
use crate::tensor::Tensor;

pub type CMatrix = DMatrix<Complex64>;

/// Magnitudes at or below this are treated as exact zeros when normalising.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CosetPattern {
    offsets: Vec<usize>,
    period: usize,
    nyquist_period: f64,
}

impl CosetPattern {
    /// Offsets must be strictly increasing in `[0, L-1]`. `P = L` (Nyquist-rate
    /// sampling) is accepted so the full pattern can serve as a reference.
    pub fn new(offsets: Vec<usize>, period: usize, nyquist_period: f64) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::invalid("coset pattern needs at least one coset"));
        }
        if !(nyquist_period.is_finite() && nyquist_period > 0.0) {
            return Err(Error::invalid("Nyquist period must be positive"));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "coset offsets {offsets:?} must be strictly increasing"
            )));
        }
        if *offsets.last().unwrap() >= period {
            return Err(Error::invalid(format!(
                "coset offsets {offsets:?} must lie in [0, {}]",
                period.saturating_sub(1)
            )));
        }
        Ok(Self {
            offsets,
            period,
            nyquist_period,
        })
    }

    /// The first `p` cosets, `c = 0, 1, ..., p-1`.
    pub fn leading(p: usize, period: usize, nyquist_period: f64) -> Result<Self> {
        Self::new((0..p).collect(), period, nyquist_period)
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cosets(&self) -> usize {
        self.offsets.len()
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn nyquist_period(&self) -> f64 {
        self.nyquist_period
    }

    pub fn is_sub_nyquist(&self) -> bool {
        self.cosets() < self.period
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pattern: CosetPattern,
    matrix: CMatrix,
}

impl MeasurementMatrix {
    pub fn pattern(&self) -> &CosetPattern {
        &self.pattern
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// `1/(L T^2)`, the diagonal of `A A^H`.
    pub fn gram_scale(&self) -> f64 {
        let t = self.pattern.nyquist_period;
        1.0 / (self.pattern.period as f64 * t * t)
    }
}

/// `A[p, l] = exp(+j 2 pi l c_p / L) / (L T)` with zero-based `l`.
pub fn build_measurement_matrix(pattern: &CosetPattern) -> MeasurementMatrix {
    let l = pattern.period;
    let scale = 1.0 / (l as f64 * pattern.nyquist_period);
    let matrix = CMatrix::from_fn(pattern.cosets(), l, |p, band| {
        // Reduce the exponent modulo L before scaling so large offsets stay exact.
        let k = (band * pattern.offsets[p]) % l;
        Complex64::from_polar(scale, 2.0 * PI * k as f64 / l as f64)
    });
    MeasurementMatrix {
        pattern: pattern.clone(),
        matrix,
    }
}

/// `t(p, n) = n L T + c_p T` as a `P x N` matrix.
pub fn coset_sampling_instants(pattern: &CosetPattern, snapshots: usize) -> DMatrix<f64> {
    let t = pattern.nyquist_period;
    let l = pattern.period as f64;
    DMatrix::from_fn(pattern.cosets(), snapshots, |p, n| {
        n as f64 * l * t + pattern.offsets[p] as f64 * t
    })
}

/// `P x N` coset samples `y_p[n] = x(n L T + c_p T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosetSamples {
    data: CMatrix,
}

impl CosetSamples {
    pub fn new(data: CMatrix) -> Self {
        Self { data }
    }

    /// Reshapes row-major samples (coset-major) into a `cosets x snapshots` matrix.
    pub fn from_row_major(cosets: usize, snapshots: usize, values: &[Complex64]) -> Result<Self> {
        if values.len() != cosets * snapshots {
            return Err(Error::invalid(format!(
                "expected {} coset samples, got {}",
                cosets * snapshots,
                values.len()
            )));
        }
        Ok(Self {
            data: CMatrix::from_row_slice(cosets, snapshots, values),
        })
    }

    pub fn data(&self) -> &CMatrix {
        &self.data
    }

    pub fn cosets(&self) -> usize {
        self.data.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.data.ncols()
    }
}

fn dft_rows(samples: &CosetSamples, pattern: &CosetPattern, fft: &dyn Fft<f64>) -> Result<CMatrix> {
    let (p, n) = samples.data.shape();
    if p != pattern.cosets() {
        return Err(Error::invalid(format!(
            "samples have {p} cosets, pattern has {}",
            pattern.cosets()
        )));
    }
    let l = pattern.period;
    let mut out = CMatrix::zeros(p, n);
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for (ci, &c) in pattern.offsets.iter().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = samples.data[(ci, k)];
        }
        fft.process(&mut row);
        for (k, v) in row.iter().enumerate() {
            // exp(-j 2 pi f_k c_p T) with f_k = k / (N L T)
            let m = (k * c) % (n * l);
            let phase = Complex64::from_polar(1.0, -2.0 * PI * m as f64 / (n * l) as f64);
            out[(ci, k)] = v * phase;
        }
    }
    Ok(out)
}

/// Per-coset N-point DFT with the coset delay phase removed, bin `k` at
/// `f_k = k / (N L T)`.
pub fn coset_dft(samples: &CosetSamples, pattern: &CosetPattern) -> Result<CMatrix> {
    let fft = FftPlanner::new().plan_fft_forward(samples.snapshots());
    dft_rows(samples, pattern, fft.as_ref())
}

/// Moore-Penrose pseudo-inverse. The rows of `A` are orthogonal with
/// `A A^H = I / (L T^2)`, so `A^+ = L T^2 A^H`.
pub fn pseudo_inverse(a: &MeasurementMatrix) -> CMatrix {
    let t = a.pattern.nyquist_period;
    let pinv = a.matrix.adjoint() * Complex64::new(a.pattern.period as f64 * t * t, 0.0);
    debug_assert!({
        let back = &a.matrix * &pinv * &a.matrix;
        let scale = a.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
        (back - &a.matrix)
            .iter()
            .all(|z| z.norm() <= 1e-9 * scale.max(1.0))
    });
    pinv
}

/// `X_hat = A^+ Y`.
pub fn recover_feature(pinv: &CMatrix, y: &CMatrix) -> Result<CMatrix> {
    if pinv.ncols() != y.nrows() {
        return Err(Error::invalid(format!(
            "pseudo-inverse is {}x{}, coset spectra are {}x{}",
            pinv.nrows(),
            pinv.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(pinv * y)
}

/// Element-wise `X / |X|`; entries with magnitude at or below [`NORMALIZE_EPS`] become zero.
pub fn normalize_feature(x: &CMatrix) -> CMatrix {
    x.map(|z| {
        let mag = z.norm();
        if mag > NORMALIZE_EPS {
            z / mag
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// `L x N x 2` real view, channel 0 real part, channel 1 imaginary part.
pub fn to_tensor(x: &CMatrix) -> Tensor<f64> {
    let (rows, cols) = x.shape();
    let mut data = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            let z = x[(r, c)];
            data.push(z.re);
            data.push(z.im);
        }
    }
    Tensor::new(vec![rows, cols, 2], data).expect("shape matches by construction")
}

pub fn from_tensor(t: &Tensor<f64>) -> Result<CMatrix> {
    match *t.shape() {
        [rows, cols, 2] => Ok(CMatrix::from_fn(rows, cols, |r, c| {
            let i = (r * cols + c) * 2;
            Complex64::new(t.data()[i], t.data()[i + 1])
        })),
        ref s => Err(Error::invalid(format!(
            "expected an L x N x 2 tensor, got {s:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeature {
    /// `X_hat`, the pseudo-inverse recovery.
    pub recovered: CMatrix,
    /// `X_bar`, the phase-normalised feature.
    pub normalized: CMatrix,
}

impl SpectralFeature {
    pub fn tensor(&self) -> Tensor<f64> {
        to_tensor(&self.normalized)
    }

    /// Energy of each recovered sub-band row before normalisation.
    pub fn row_energy(&self) -> Vec<f64> {
        self.recovered
            .row_iter()
            .map(|r| r.iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }
}

/// Cached sampling geometry for repeated acquisitions with one pattern.
#[derive(Clone)]
pub struct FrontEnd {
    pattern: CosetPattern,
    matrix: MeasurementMatrix,
    pinv: CMatrix,
    snapshots: usize,
    instants: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FrontEnd {
    pub fn new(pattern: CosetPattern, snapshots: usize) -> Result<Self> {
        if snapshots == 0 {
            return Err(Error::invalid("need at least one snapshot per coset"));
        }
        let matrix = build_measurement_matrix(&pattern);
        let pinv = pseudo_inverse(&matrix);
        let grid = coset_sampling_instants(&pattern, snapshots);
        let instants = (0..pattern.cosets())
            .flat_map(|p| (0..snapshots).map(move |n| (p, n)))
            .map(|(p, n)| grid[(p, n)])
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(snapshots);
        Ok(Self {
            pattern,
            matrix,
            pinv,
            snapshots,
            instants,
            fft,
        })
    }

    pub fn pattern(&self) -> &CosetPattern {
        &self.pattern
    }

    pub fn measurement(&self) -> &MeasurementMatrix {
        &self.matrix
    }

    pub fn pinv(&self) -> &CMatrix {
        &self.pinv
    }

    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    /// Sampling instants in coset-major order.
    pub fn instants(&self) -> &[f64] {
        &self.instants
    }

    /// Samples the received signal on the coset grid.
    pub fn acquire<R: Rng + ?Sized>(
        &self,
        placement: &PuPlacement,
        scenario: &ScenarioConfig,
        rng: &mut R,
    ) -> Result<CosetSamples> {
        let signal =
            signal_model::sample_received_signal(placement, scenario, &self.instants, rng)?;
        CosetSamples::from_row_major(self.pattern.cosets(), self.snapshots, &signal.samples)
    }

    pub fn coset_spectra(&self, samples: &CosetSamples) -> Result<CMatrix> {
        dft_rows(samples, &self.pattern, self.fft.as_ref())
    }

    pub fn feature(&self, samples: &CosetSamples) -> Result<SpectralFeature> {
        let y = self.coset_spectra(samples)?;
        let recovered = recover_feature(&self.pinv, &y)?;
        let normalized = normalize_feature(&recovered);
        Ok(SpectralFeature {
            recovered,
            normalized,
        })
    }
}

impl std::fmt::Debug for FrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrontEnd")
            .field("pattern", &self.pattern)
            .field("snapshots", &self.snapshots)
            .finish_non_exhaustive()
    }
}
