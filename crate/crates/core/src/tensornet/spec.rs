use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of input channels: real and imaginary parts of the feature.
pub const INPUT_CHANNELS: usize = 2;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; each 3x3 convolution shrinks both spatial dims by 2.
    Valid,
    /// One pixel of zero padding; spatial dims are preserved.
    Same,
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub conv1: f64,
    pub conv2: f64,
    pub hidden: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        conv1: 0.0,
        conv2: 0.0,
        hidden: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.conv1, self.conv2, self.hidden]
    }
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            conv1: 0.2,
            conv2: 0.2,
            hidden: 0.5,
        }
    }
}

/// Two 3x3 convolutions, one ReLU hidden layer and a sigmoid output per sub-band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WssNetSpec {
    /// Sub-bands `L`; input height and output width.
    pub subbands: usize,
    /// Snapshots per coset `N`; input width.
    pub snapshots: usize,
    pub conv1_kernels: usize,
    pub conv2_kernels: usize,
    pub hidden_units: usize,
    pub padding: Padding,
    pub dropout: DropoutRates,
}

impl WssNetSpec {
    /// 32/16 kernels and 128 hidden units.
    pub fn full(subbands: usize, snapshots: usize) -> Self {
        Self {
            subbands,
            snapshots,
            conv1_kernels: 32,
            conv2_kernels: 16,
            hidden_units: 128,
            padding: Padding::Valid,
            dropout: DropoutRates::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv1_kernels == 0 || self.conv2_kernels == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.subbands == 0 || self.snapshots == 0 {
            return Err(Error::invalid("input dims must be positive"));
        }
        let (h, w) = self.conv2_out();
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {}x{} is too small for two {:?} 3x3 convolutions",
                self.subbands, self.snapshots, self.padding
            )));
        }
        for p in self.dropout.as_array() {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn shrink(&self, dim: usize) -> usize {
        (dim + 2 * self.padding.amount()).saturating_sub(KERNEL - 1)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.subbands, self.snapshots, INPUT_CHANNELS]
    }

    pub fn conv1_out(&self) -> (usize, usize) {
        (self.shrink(self.subbands), self.shrink(self.snapshots))
    }

    pub fn conv2_out(&self) -> (usize, usize) {
        let (h, w) = self.conv1_out();
        (self.shrink(h), self.shrink(w))
    }

    pub fn flatten_len(&self) -> usize {
        let (h, w) = self.conv2_out();
        h * w * self.conv2_kernels
    }

    pub fn outputs(&self) -> usize {
        self.subbands
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_shape_trace() {
        let s = WssNetSpec::full(40, 64);
        assert_eq!(s.conv1_out(), (38, 62));
        assert_eq!(s.conv2_out(), (36, 60));
        assert_eq!(s.flatten_len(), 34_560);
        assert_eq!(s.outputs(), 40);
        s.validate().unwrap();
    }

    #[test]
    fn valid_padding_needs_five_rows() {
        let mut s = WssNetSpec::full(4, 8);
        assert!(s.validate().is_err());
        s.padding = Padding::Same;
        s.validate().unwrap();
        assert_eq!(s.conv2_out(), (4, 8));
    }
}
