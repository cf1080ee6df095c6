use crate::error::{Error, Result};
use crate::signal_model::OccupancyVector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `L x N x 2` phase-normalised feature.
    pub feature: Tensor<f32>,
    pub label: OccupancyVector,
}

/// Labelled feature set; every feature shares one shape and every label has length `L`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.feature.shape().to_vec();
            if shape.len() != 3 || shape[2] != 2 {
                return Err(Error::invalid(format!(
                    "features must be L x N x 2, got {shape:?}"
                )));
            }
            for (i, s) in samples.iter().enumerate() {
                if s.feature.shape() != shape.as_slice() {
                    return Err(Error::invalid(format!(
                        "sample {i} has shape {:?}",
                        s.feature.shape()
                    )));
                }
                if s.label.len() != shape[0] {
                    return Err(Error::invalid(format!(
                        "sample {i} label length {} does not match L = {}",
                        s.label.len(),
                        shape[0]
                    )));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.feature.shape())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn labels(&self) -> impl Iterator<Item = &OccupancyVector> {
        self.samples.iter().map(|s| &s.label)
    }

    /// Concatenates datasets with matching shapes.
    pub fn concat(parts: impl IntoIterator<Item = LabeledDataset>) -> Result<Self> {
        Self::new(parts.into_iter().flat_map(|d| d.samples).collect())
    }
}
