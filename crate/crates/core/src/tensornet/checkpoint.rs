//! Binary model checkpoint.
//!
//! ```text
//! "WSSN" | u32 version
//! u32 L | u32 N | u32 input channels | u32 conv1 | u32 conv2 | u32 hidden
//! u8 padding (0 valid, 1 same) | f64 dropout x3
//! u32 tensor count, then per tensor: u32 rank | u32 dims... | f32 values...
//! "MASK" + u64 bit count + packed bits (LSB first)   or   "NOMK"
//! ```
//!
//! All integers and floats are little-endian. Values are stored as float32.

use std::fs;
use std::path::Path;

use super::model::{
    Conv2d, Dense, DomainSpecific, GeneralFeature, ModelWeights, PruneMask, Scalar,
};
use super::spec::{DropoutRates, Padding, WssNetSpec, INPUT_CHANNELS};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSSN";
pub const VERSION: u32 = 1;
const MASK_TAG: &[u8; 4] = b"MASK";
const NO_MASK_TAG: &[u8; 4] = b"NOMK";
const TENSOR_COUNT: u32 = 8;

pub(crate) fn write_f32_tensor<F: Scalar>(w: &mut ByteWriter, shape: &[usize], values: &[F]) {
    w.tensor(shape, values.iter().map(|v| v.to_f64_lossy() as f32));
}

pub(crate) fn read_f32_tensor(r: &mut ByteReader<'_>, expected: &[usize]) -> Result<Vec<f32>> {
    let at = r.position();
    let (shape, values) = r.tensor()?;
    if shape != expected {
        return Err(Error::decode(
            at,
            format!("tensor shape {shape:?}, expected {expected:?}"),
        ));
    }
    Ok(values)
}

pub(crate) fn write_model_body<F: Scalar>(w: &mut ByteWriter, model: &ModelWeights<F>) {
    let s = model.spec();
    for v in [
        s.subbands,
        s.snapshots,
        INPUT_CHANNELS,
        s.conv1_kernels,
        s.conv2_kernels,
        s.hidden_units,
    ] {
        w.len_u32(v);
    }
    w.u8(match s.padding {
        Padding::Valid => 0,
        Padding::Same => 1,
    });
    for p in s.dropout.as_array() {
        w.f64(p);
    }
    w.u32(TENSOR_COUNT);
    for (shape, values) in model.shapes().iter().zip(model.slices()) {
        write_f32_tensor(w, shape, values);
    }
    match model.mask() {
        Some(m) => {
            w.bytes(MASK_TAG);
            w.bitset(m.keep());
        }
        None => w.bytes(NO_MASK_TAG),
    }
}

pub(crate) fn read_model_body(r: &mut ByteReader<'_>) -> Result<ModelWeights<f32>> {
    let at = r.position();
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [subbands, snapshots, channels, conv1_kernels, conv2_kernels, hidden_units] = dims;
    if channels != INPUT_CHANNELS {
        return Err(Error::decode(
            at + 8,
            format!("unsupported input channel count {channels}"),
        ));
    }
    let pad_at = r.position();
    let padding = match r.u8()? {
        0 => Padding::Valid,
        1 => Padding::Same,
        other => {
            return Err(Error::decode(
                pad_at,
                format!("unknown padding code {other}"),
            ))
        }
    };
    let dropout = DropoutRates {
        conv1: r.f64()?,
        conv2: r.f64()?,
        hidden: r.f64()?,
    };
    let spec = WssNetSpec {
        subbands,
        snapshots,
        conv1_kernels,
        conv2_kernels,
        hidden_units,
        padding,
        dropout,
    };
    spec.validate()
        .map_err(|e| Error::decode(at, e.to_string()))?;
    let count_at = r.position();
    let count = r.u32()?;
    if count != TENSOR_COUNT {
        return Err(Error::decode(
            count_at,
            format!("expected {TENSOR_COUNT} tensors, found {count}"),
        ));
    }
    let reference = ModelWeights::<f32>::zeros(&spec)?;
    let shapes = reference.shapes();
    let mut tensors = Vec::with_capacity(8);
    for shape in &shapes {
        tensors.push(read_f32_tensor(r, shape)?);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("eight tensors");
    let gf = GeneralFeature {
        conv1: Conv2d {
            out_channels: conv1_kernels,
            in_channels: INPUT_CHANNELS,
            weight: next(),
            bias: next(),
        },
        conv2: Conv2d {
            out_channels: conv2_kernels,
            in_channels: conv1_kernels,
            weight: next(),
            bias: next(),
        },
    };
    let flatten = spec.flatten_len();
    let ds = DomainSpecific {
        hidden: Dense {
            outputs: hidden_units,
            inputs: flatten,
            weight: next(),
            bias: next(),
        },
        output: Dense {
            outputs: subbands,
            inputs: hidden_units,
            weight: next(),
            bias: next(),
        },
    };

    let tag_at = r.position();
    let tag = r.take(4)?;
    let mask = if tag == MASK_TAG {
        let bits = r.bitset()?;
        if bits.len() != ds.hidden.weight.len() {
            return Err(Error::decode(
                tag_at,
                "prune mask length does not match theta_3",
            ));
        }
        Some(PruneMask::new(bits))
    } else if tag == NO_MASK_TAG {
        None
    } else {
        return Err(Error::decode(tag_at, "unknown mask section tag"));
    };
    if let Some(m) = &mask {
        let leaked = ds
            .hidden
            .weight
            .iter()
            .zip(m.keep())
            .any(|(&v, &k)| !k && v != 0.0);
        if leaked {
            return Err(Error::decode(tag_at, "pruned weights are non-zero"));
        }
    }
    ModelWeights::from_parts(spec, gf, ds, mask).map_err(|e| Error::decode(at, e.to_string()))
}

pub fn encode_checkpoint<F: Scalar>(model: &ModelWeights<F>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_model_body(&mut w, model);
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    let mut r = ByteReader::new(bytes);
    r.expect_tag(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::decode(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let model = read_model_body(&mut r)?;
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint<F: Scalar>(model: &ModelWeights<F>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    decode_checkpoint(&fs::read(path)?)
}
