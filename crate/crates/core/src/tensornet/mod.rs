//! Minimal convolutional network: two 3x3 convolutions, a ReLU hidden layer
//! and a sigmoid output per sub-band, with exact backpropagation and SGD.

pub mod checkpoint;
mod data;
pub mod gradcheck;
mod model;
mod network;
mod spec;
mod train;

pub use crate::tensor::Tensor;
pub use data::{LabeledDataset, Sample};
pub use model::{
    init_bound, init_weights, Conv2d, Dense, DomainSpecific, GeneralFeature, Gradients,
    ModelWeights, PruneMask, Scalar,
};
pub use network::{
    backward, bce_loss, forward, sample_bce, sigmoid, DropoutMasks, ForwardCache, Mode, Scope,
    BCE_EPS,
};
pub use spec::{DropoutRates, Padding, WssNetSpec, INPUT_CHANNELS, KERNEL};
pub use train::{
    batch_gradient, dataset_loss, sgd_step, train_epoch, train_from, train_offline, EpochRecord,
    TrainConfig, TrainReport,
};
