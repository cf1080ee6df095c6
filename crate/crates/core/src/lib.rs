//! Cooperative wideband spectrum sensing with sub-Nyquist multicoset sampling,
//! a pruned convolutional occupancy detector and federated transfer learning
//! across secondary users.

pub mod baselines;
mod codec;
pub mod error;
pub mod federation;
pub mod harness;
pub mod multicoset;
pub mod pruning;
pub mod signal_model;
mod tensor;
pub mod tensornet;

pub use error::{Error, Result};
pub use signal_model::OccupancyVector;
pub use tensor::Tensor;
