//! Wideband occupancy model and received-signal generator.
//!
//! The monitored band `[0, B]` is split into `L` sub-bands of width `B0 = B/L`.
//! Each active primary user (PU) occupies one sub-band and transmits a sinc pulse
//! centred on that sub-band:
//!
//! `x(t) = sum_k sqrt(E_k B0) sinc(B0 (t - t_k)) exp(j 2 pi f_k t) + n(t)`
//!
//! All arithmetic here is double precision.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the additive noise level is specified for a rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    Noiseless,
    /// Ratio of the average noiseless power over the sampled instants to `sigma^2`.
    SnrDb(f64),
    /// Explicit noise variance `sigma^2`.
    Variance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of sub-bands `L`.
    pub subbands: usize,
    /// Total monitored bandwidth `B` in Hz.
    pub bandwidth_hz: f64,
    /// Number of active PUs `K`.
    pub num_pus: usize,
    /// Signal duration `Td` in seconds; PU time offsets are drawn from `(0, Td)`.
    pub duration_s: f64,
    pub noise: Noise,
    /// Per-PU energy `E_k`.
    pub pu_energy: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn subband_width(&self) -> f64 {
        self.bandwidth_hz / self.subbands as f64
    }

    /// Nyquist period `T = 1/B` of the complex baseband signal.
    pub fn nyquist_period(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.subbands == 0 {
            return Err(Error::invalid("sub-band count must be positive"));
        }
        if !(self.bandwidth_hz.is_finite() && self.bandwidth_hz > 0.0) {
            return Err(Error::invalid("bandwidth must be positive and finite"));
        }
        let b0 = self.subband_width();
        if b0.is_nan()
            || b0 <= 0.0
            || ((b0 * self.subbands as f64 - self.bandwidth_hz).abs() > 1e-12 * self.bandwidth_hz)
        {
            return Err(Error::invalid("sub-band width does not tile the band"));
        }
        if self.num_pus > self.subbands {
            return Err(Error::invalid(format!(
                "K = {} exceeds the number of sub-bands L = {}",
                self.num_pus, self.subbands
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::invalid("signal duration must be positive"));
        }
        if !(self.pu_energy.is_finite() && self.pu_energy >= 0.0) {
            return Err(Error::invalid("PU energy must be non-negative"));
        }
        match self.noise {
            Noise::Variance(v) if !(v.is_finite() && v >= 0.0) => {
                Err(Error::invalid("noise variance must be non-negative"))
            }
            Noise::SnrDb(s) if !s.is_finite() => Err(Error::invalid("SNR must be finite")),
            _ => Ok(()),
        }
    }
}

/// Binary sub-band occupancy vector (index 0 is sub-band 1).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OccupancyVector(Vec<bool>);

impl OccupancyVector {
    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Builds a vector of length `len` with the given zero-based indices set.
    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut bits = vec![false; len];
        for i in indices {
            *bits.get_mut(i).ok_or_else(|| {
                Error::invalid(format!("sub-band index {i} out of range {len}"))
            })? = true;
        }
        Ok(Self(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, index: usize) -> bool {
        self.0[index]
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Zero-based indices of the occupied sub-bands, ascending.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    /// Number of positions where both vectors agree.
    pub fn matches(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count()
    }
}

impl fmt::Display for OccupancyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(if *b { "1" } else { "0" })?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimaryUser {
    /// Zero-based index of the occupied sub-band.
    pub subband: usize,
    pub carrier_hz: f64,
    pub offset_s: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PuPlacement {
    pub users: Vec<PrimaryUser>,
}

impl PuPlacement {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Normalised sinc, `sin(pi x) / (pi x)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Draws `k` distinct occupied sub-bands uniformly out of `l`.
pub fn draw_occupancy<R: Rng + ?Sized>(l: usize, k: usize, rng: &mut R) -> Result<OccupancyVector> {
    if k > l {
        return Err(Error::invalid(format!(
            "cannot occupy {k} of {l} sub-bands"
        )));
    }
    OccupancyVector::from_indices(l, index::sample(rng, l, k))
}

/// One PU per occupied sub-band, carrier snapped to the sub-band centre and a
/// time offset drawn uniformly from the open interval `(0, Td)`.
pub fn place_pus<R: Rng + ?Sized>(
    occupancy: &OccupancyVector,
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<PuPlacement> {
    if occupancy.len() != config.subbands {
        return Err(Error::invalid(format!(
            "occupancy length {} does not match L = {}",
            occupancy.len(),
            config.subbands
        )));
    }
    let b0 = config.subband_width();
    let users = occupancy
        .occupied()
        .map(|band| {
            let offset_s = loop {
                let t = rng.random::<f64>() * config.duration_s;
                if t > 0.0 {
                    break t;
                }
            };
            PrimaryUser {
                subband: band,
                carrier_hz: (band as f64 + 0.5) * b0,
                offset_s,
                energy: config.pu_energy,
            }
        })
        .collect();
    Ok(PuPlacement { users })
}

fn pu_sample(pu: &PrimaryUser, b0: f64, t: f64) -> Complex64 {
    let amplitude = (pu.energy * b0).sqrt() * sinc(b0 * (t - pu.offset_s));
    Complex64::from_polar(amplitude, 2.0 * PI * pu.carrier_hz * t)
}

/// Noiseless superposition of all PU pulses at the given instants.
pub fn render_noiseless(
    placement: &PuPlacement,
    config: &ScenarioConfig,
    instants: &[f64],
) -> Vec<Complex64> {
    let b0 = config.subband_width();
    instants
        .iter()
        .map(|&t| placement.users.iter().map(|pu| pu_sample(pu, b0, t)).sum())
        .collect()
}

pub fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// `sigma^2 = P_sig / 10^(snr/10)`.
pub fn noise_variance_for_power(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Noise variance that realises `snr_db` against the noiseless power of this
/// placement over the sampled instants.
pub fn awgn_sigma(
    snr_db: f64,
    placement: &PuPlacement,
    config: &ScenarioConfig,
    instants: &[f64],
) -> Result<f64> {
    if placement.is_empty() {
        return Err(Error::invalid(
            "SNR is undefined without active PUs; specify the noise variance directly",
        ));
    }
    let power = mean_power(&render_noiseless(placement, config, instants));
    Ok(noise_variance_for_power(snr_db, power))
}

/// Adds circular complex Gaussian noise of total variance `variance`.
pub fn add_awgn<R: Rng + ?Sized>(samples: &mut [Complex64], variance: f64, rng: &mut R) {
    if variance == 0.0 {
        return;
    }
    let scale = (variance / 2.0).sqrt();
    for s in samples {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *s += Complex64::new(re * scale, im * scale);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub samples: Vec<Complex64>,
    pub noise_variance: f64,
}

/// Renders the received signal at `instants` with the noise level from `config.noise`.
pub fn sample_received_signal<R: Rng + ?Sized>(
    placement: &PuPlacement,
    config: &ScenarioConfig,
    instants: &[f64],
    rng: &mut R,
) -> Result<ReceivedSignal> {
    let mut samples = render_noiseless(placement, config, instants);
    let noise_variance = match config.noise {
        Noise::Noiseless => 0.0,
        Noise::Variance(v) => v,
        Noise::SnrDb(snr) => {
            if placement.is_empty() {
                return Err(Error::invalid(
                    "SNR is undefined without active PUs; specify the noise variance directly",
                ));
            }
            noise_variance_for_power(snr, mean_power(&samples))
        }
    };
    add_awgn(&mut samples, noise_variance, rng);
    Ok(ReceivedSignal {
        samples,
        noise_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(l: usize, b: f64, k: usize) -> ScenarioConfig {
        ScenarioConfig {
            subbands: l,
            bandwidth_hz: b,
            num_pus: k,
            duration_s: 8e-6,
            noise: Noise::Noiseless,
            pu_energy: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn occupancy_edge_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_occupancy(5, 0, &mut rng).unwrap().bits(), &[false; 5]);
        assert_eq!(draw_occupancy(3, 3, &mut rng).unwrap().bits(), &[true; 3]);
        assert_eq!(draw_occupancy(40, 8, &mut rng).unwrap().popcount(), 8);
        assert!(matches!(
            draw_occupancy(3, 4, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn occupancy_is_seed_deterministic() {
        let a = draw_occupancy(40, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = draw_occupancy(40, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn carriers_snap_to_subband_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = scenario(4, 32e6, 1);
        let occ = OccupancyVector::from_bits(vec![true, false, false, false]);
        let p = place_pus(&occ, &cfg, &mut rng).unwrap();
        assert_eq!(p.users[0].carrier_hz, 4e6);

        let cfg = scenario(40, 320e6, 1);
        let occ = OccupancyVector::from_indices(40, [39]).unwrap();
        let p = place_pus(&occ, &cfg, &mut rng).unwrap();
        assert_eq!(p.users[0].carrier_hz, 316e6);
        assert!(p.users[0].offset_s > 0.0 && p.users[0].offset_s < cfg.duration_s);

        let empty = place_pus(&OccupancyVector::empty(40), &cfg, &mut rng).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn pulse_peak_at_offset() {
        let cfg = scenario(40, 320e6, 1);
        let pu = PrimaryUser {
            subband: 3,
            carrier_hz: 28e6,
            offset_s: 1.3e-6,
            energy: 1.0,
        };
        let placement = PuPlacement { users: vec![pu] };
        let got = render_noiseless(&placement, &cfg, &[pu.offset_s])[0];
        let want = Complex64::from_polar((8e6f64).sqrt(), 2.0 * PI * pu.carrier_hz * pu.offset_s);
        assert!((got - want).norm() < 1e-9);
    }

    #[test]
    fn empty_noiseless_is_zero() {
        let cfg = scenario(8, 64e6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sig =
            sample_received_signal(&PuPlacement::default(), &cfg, &[0.0, 1e-7, 2e-7], &mut rng)
                .unwrap();
        assert!(sig.samples.iter().all(|s| *s == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn awgn_sigma_definition() {
        assert_eq!(noise_variance_for_power(0.0, 3.5), 3.5);
        assert!((noise_variance_for_power(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((noise_variance_for_power(-10.0, 2.0) - 20.0).abs() < 1e-12);
        let cfg = scenario(8, 64e6, 0);
        assert!(awgn_sigma(0.0, &PuPlacement::default(), &cfg, &[0.0]).is_err());
    }

    #[test]
    fn snr_without_pus_is_rejected() {
        let mut cfg = scenario(8, 64e6, 0);
        cfg.noise = Noise::SnrDb(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_received_signal(&PuPlacement::default(), &cfg, &[0.0], &mut rng).is_err());
    }

    #[test]
    fn empirical_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut samples = vec![Complex64::new(0.0, 0.0); 200_000];
        add_awgn(&mut samples, 0.37, &mut rng);
        let var = mean_power(&samples);
        assert!((var / 0.37 - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn validate_rejects_bad_scenarios() {
        let mut cfg = scenario(4, 32e6, 5);
        assert!(cfg.validate().is_err());
        cfg.num_pus = 2;
        assert!(cfg.validate().is_ok());
        cfg.duration_s = 0.0;
        assert!(cfg.validate().is_err());
    }
}
