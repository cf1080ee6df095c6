//! FTL protocol messages and their wire encoding.
//!
//! ```text
//! "FTLM" | u32 version | u8 type (1 broadcast, 2 upload) | u32 round
//! broadcast: model body as in the checkpoint format (spec, 8 tensors, mask section)
//! upload:    u32 SU id | u64 sample count | 4 tensors (theta_3 w/b, theta_4 w/b)
//! ```

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensornet::checkpoint::{
    read_f32_tensor, read_model_body, write_f32_tensor, write_model_body,
};
use crate::tensornet::{Dense, DomainSpecific, ModelWeights, Scalar};

pub const MAGIC: &[u8; 4] = b"FTLM";
pub const VERSION: u32 = 1;
const TYPE_BROADCAST: u8 = 1;
const TYPE_UPLOAD: u8 = 2;

/// Server to SU: the global model `Theta^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBroadcast<F = f32> {
    pub round: u32,
    pub weights: ModelWeights<F>,
}

/// SU to server: the accumulated domain-specific gradient `G_ds^{t,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpload<F = f32> {
    pub round: u32,
    pub su_id: u32,
    /// `|D_T^i|`.
    pub sample_count: u64,
    pub gradient: DomainSpecific<F>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Message<F = f32> {
    Broadcast(ModelBroadcast<F>),
    Upload(GradientUpload<F>),
}

impl<F> Message<F> {
    pub fn round(&self) -> u32 {
        match self {
            Message::Broadcast(b) => b.round,
            Message::Upload(u) => u.round,
        }
    }
}

/// Encodes any message; values are written as float32.
pub fn serialize_message<F: Scalar>(msg: &Message<F>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    match msg {
        Message::Broadcast(b) => {
            w.u8(TYPE_BROADCAST);
            w.u32(b.round);
            write_model_body(&mut w, &b.weights);
        }
        Message::Upload(u) => {
            w.u8(TYPE_UPLOAD);
            w.u32(u.round);
            w.u32(u.su_id);
            w.u64(u.sample_count);
            for (shape, values) in u.gradient.shapes().iter().zip(u.gradient.slices()) {
                write_f32_tensor(&mut w, shape, values);
            }
        }
    }
    w.into_inner()
}

fn read_upload_gradient(r: &mut ByteReader<'_>) -> Result<DomainSpecific<f32>> {
    // theta_3's shape is self-describing; theta_4 must chain onto it.
    let at = r.position();
    let (shape, weight) = r.tensor()?;
    let [hidden, flatten] = shape[..] else {
        return Err(Error::decode(
            at,
            format!("theta_3 must be rank 2, got {shape:?}"),
        ));
    };
    let bias = read_f32_tensor(r, &[hidden])?;
    let at = r.position();
    let (shape, out_weight) = r.tensor()?;
    let [outputs, inputs] = shape[..] else {
        return Err(Error::decode(
            at,
            format!("theta_4 must be rank 2, got {shape:?}"),
        ));
    };
    if inputs != hidden {
        return Err(Error::decode(
            at,
            format!("theta_4 expects {inputs} inputs, theta_3 has {hidden} units"),
        ));
    }
    let out_bias = read_f32_tensor(r, &[outputs])?;
    Ok(DomainSpecific {
        hidden: Dense {
            outputs: hidden,
            inputs: flatten,
            weight,
            bias,
        },
        output: Dense {
            outputs,
            inputs,
            weight: out_weight,
            bias: out_bias,
        },
    })
}

pub fn deserialize_message(bytes: &[u8]) -> Result<Message> {
    let mut r = ByteReader::new(bytes);
    r.expect_tag(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::decode(
            4,
            format!("unsupported message version {version}"),
        ));
    }
    let type_at = r.position();
    let kind = r.u8()?;
    let round = r.u32()?;
    let msg = match kind {
        TYPE_BROADCAST => Message::Broadcast(ModelBroadcast {
            round,
            weights: read_model_body(&mut r)?,
        }),
        TYPE_UPLOAD => {
            let su_id = r.u32()?;
            let sample_count = r.u64()?;
            Message::Upload(GradientUpload {
                round,
                su_id,
                sample_count,
                gradient: read_upload_gradient(&mut r)?,
            })
        }
        other => {
            return Err(Error::decode(
                type_at,
                format!("unknown message type {other}"),
            ))
        }
    };
    r.finish()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::{init_weights, DropoutRates, Padding, PruneMask, WssNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> ModelWeights<f32> {
        let spec = WssNetSpec {
            subbands: 5,
            snapshots: 5,
            conv1_kernels: 2,
            conv2_kernels: 1,
            hidden_units: 3,
            padding: Padding::Valid,
            dropout: DropoutRates::NONE,
        };
        init_weights(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn upload_round_trip_and_offsets() {
        let w = weights();
        let msg = Message::Upload(GradientUpload {
            round: 7,
            su_id: 3,
            sample_count: 100,
            gradient: w.ds.clone(),
        });
        let bytes = serialize_message(&msg);
        assert_eq!(deserialize_message(&bytes).unwrap(), msg);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            deserialize_message(&bad),
            Err(Error::Decode { offset: 8, .. })
        ));
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(
                deserialize_message(&bytes[..cut]),
                Err(Error::Decode { .. })
            ));
        }
    }

    #[test]
    fn broadcast_keeps_mask() {
        let mut w = weights();
        let n = w.ds.hidden.weight.len();
        w.set_mask(PruneMask::new((0..n).map(|i| i % 2 == 0).collect()))
            .unwrap();
        let msg = Message::Broadcast(ModelBroadcast {
            round: 0,
            weights: w,
        });
        let back = deserialize_message(&serialize_message(&msg)).unwrap();
        assert_eq!(back, msg);
        let Message::Broadcast(b) = back else {
            unreachable!()
        };
        assert_eq!(b.weights.mask().unwrap().pruned_count(), n / 2);
    }
}
