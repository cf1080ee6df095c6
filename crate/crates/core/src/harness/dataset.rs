//! Synthetic labelled datasets and their on-disk form.
//!
//! A dataset is stored as `<stem>.json` (metadata) next to `<stem>.bin`:
//!
//! ```text
//! "WSSD" | u32 version | u64 count | u32 L | u32 N | f32 features (count x L x N x 2)
//! u64 bit count | label bits (count x L, LSB first)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DomainConfig, ExperimentConfig, SnrRange};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::multicoset::{CMatrix, CosetSamples, FrontEnd};
use crate::signal_model::{draw_occupancy, place_pus, Noise, OccupancyVector};
use crate::tensor::Tensor;
use crate::tensornet::{LabeledDataset, Sample};

const MAGIC: &[u8; 4] = b"WSSD";
const VERSION: u32 = 1;

/// Stable 64-bit seed from a base seed, a stream name and an index.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn seeded_rng(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// SNR assignment for generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrDraw {
    Fixed(f64),
    /// Uniform in `[min_db, max_db]`, drawn per sample.
    Uniform(SnrRange),
    Noiseless,
}

impl SnrDraw {
    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Noise {
        match *self {
            SnrDraw::Fixed(db) => Noise::SnrDb(db),
            SnrDraw::Uniform(r) if r.max_db > r.min_db => {
                Noise::SnrDb(rng.random_range(r.min_db..=r.max_db))
            }
            SnrDraw::Uniform(r) => Noise::SnrDb(r.min_db),
            SnrDraw::Noiseless => Noise::Noiseless,
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRequest {
    pub domain: DomainConfig,
    pub count: usize,
    pub snr: SnrDraw,
    pub seed: u64,
}

/// Draws sample `index` of `request`: occupancy, PU placement, noise level and coset samples.
pub fn draw_scenario(
    config: &ExperimentConfig,
    front_end: &FrontEnd,
    request: &DatasetRequest,
    index: usize,
) -> Result<(CosetSamples, OccupancyVector)> {
    let mut rng = seeded_rng(request.seed, "sample", index as u64);
    let label = draw_occupancy(config.subbands, request.domain.num_pus, &mut rng)?;
    let mut scenario = config.scenario(&request.domain, Noise::Noiseless);
    scenario.noise = request.snr.noise(&mut rng);
    let placement = place_pus(&label, &scenario, &mut rng)?;
    let coset = front_end.acquire(&placement, &scenario, &mut rng)?;
    Ok((coset, label))
}

/// Generates `count` samples; sample `i` uses its own RNG stream so any
/// prefix of a larger request is identical to a smaller one.
pub fn build_dataset(
    config: &ExperimentConfig,
    front_end: &FrontEnd,
    request: &DatasetRequest,
) -> Result<LabeledDataset> {
    let samples = (0..request.count)
        .map(|i| {
            let (coset, label) = draw_scenario(config, front_end, request, i)?;
            let feature = front_end.feature(&coset)?.tensor().map(|v| v as f32);
            Ok(Sample { feature, label })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples)
}

/// Coset spectra `Y` and labels for the same draws as [`build_dataset`].
pub fn build_spectra(
    config: &ExperimentConfig,
    front_end: &FrontEnd,
    request: &DatasetRequest,
) -> Result<Vec<(CMatrix, OccupancyVector)>> {
    (0..request.count)
        .map(|i| {
            let (coset, label) = draw_scenario(config, front_end, request, i)?;
            Ok((front_end.coset_spectra(&coset)?, label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub request: DatasetRequest,
    pub subbands: usize,
    pub snapshots: usize,
    /// SHA-256 of the experiment configuration JSON, hex encoded.
    pub config_hash: String,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(config.to_json().as_bytes()))
}

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn encode_dataset(data: &LabeledDataset, subbands: usize, snapshots: usize) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(data.len() as u64);
    w.len_u32(subbands);
    w.len_u32(snapshots);
    let mut bits = Vec::with_capacity(data.len() * subbands);
    for s in data.iter() {
        if s.feature.shape() != [subbands, snapshots, 2] {
            return Err(Error::invalid(format!(
                "feature shape {:?}",
                s.feature.shape()
            )));
        }
        for &v in s.feature.data() {
            w.f32(v);
        }
        bits.extend_from_slice(s.label.bits());
    }
    w.bitset(&bits);
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_tag(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::decode(
            4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let count_at = r.position();
    let count =
        usize::try_from(r.u64()?).map_err(|_| Error::decode(count_at, "sample count overflows"))?;
    let l = r.u32()? as usize;
    let n = r.u32()? as usize;
    let per = l
        .checked_mul(n)
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| Error::decode(count_at, "feature size overflows"))?;
    let total = per
        .checked_mul(count)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::decode(count_at, "dataset size overflows"))?;
    if total > bytes.len() {
        return Err(Error::decode(count_at, "dataset is truncated"));
    }
    let mut features = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = Vec::with_capacity(per);
        for _ in 0..per {
            v.push(r.f32()?);
        }
        features.push(v);
    }
    let bits_at = r.position();
    let bits = r.bitset()?;
    if bits.len() != count * l {
        return Err(Error::decode(
            bits_at,
            format!("expected {} label bits, found {}", count * l, bits.len()),
        ));
    }
    r.finish()?;
    let samples = features
        .into_iter()
        .zip(bits.chunks(l.max(1)))
        .map(|(f, b)| {
            Ok(Sample {
                feature: Tensor::new(vec![l, n, 2], f)?,
                label: OccupancyVector::from_bits(b.to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples)
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_dataset(
    stem: impl AsRef<Path>,
    data: &LabeledDataset,
    meta: &DatasetMeta,
) -> Result<()> {
    let (json, bin) = sidecar_paths(stem.as_ref());
    fs::write(bin, encode_dataset(data, meta.subbands, meta.snapshots)?)?;
    fs::write(json, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_dataset(stem: impl AsRef<Path>) -> Result<(LabeledDataset, DatasetMeta)> {
    let (json, bin) = sidecar_paths(stem.as_ref());
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(json)?)?;
    let data = decode_dataset(&fs::read(bin)?)?;
    if data
        .feature_shape()
        .is_some_and(|s| s != [meta.subbands, meta.snapshots, 2])
    {
        return Err(Error::Config(
            "dataset metadata disagrees with its binary".into(),
        ));
    }
    Ok((data, meta))
}
