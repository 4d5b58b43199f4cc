//! Small dense/convolutional network substrate with layer-wise reverse-mode
//! differentiation. Generic over `f32` (training) and `f64` (gradient checks).

mod layers;
mod optim;
mod sequential;
mod serialize;
mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub use layers::Layer;
pub use optim::Adam;
pub use sequential::{Classifier, Sequential};
pub use serialize::{read_sequential, write_sequential};
pub use train::{
    class_weights, predict_positive, train, weighted_cross_entropy, Dataset, EpochMetrics, TensorDataset, TrainConfig,
    TrainReport,
};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A trainable parameter with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    pub value: ArrayD<F>,
    pub grad: Option<ArrayD<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        Tensor { value, grad: None }
    }

    pub fn dims(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            value: self.value.mapv(|v| G::c(v.to_f64().unwrap_or(0.0))),
            grad: None,
        }
    }
}

/// Declarative layer description. Convolutions use "same" zero padding
/// (`kernel / 2`) so the spatial size shrinks only through `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { channels_out: usize, kernel: usize, stride: usize },
    FullyConnected { n_out: usize },
    ReLU,
    Dropout { rate: f64 },
    GlobalAveragePool,
    Softmax,
    /// Nearest-neighbour upsampling of a (C, H, W) map.
    Upsample { factor: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::FormError::Config;
        match *self {
            LayerSpec::Conv { channels_out, kernel, stride } => {
                if channels_out == 0 || stride == 0 {
                    return Err(Config(format!("invalid conv {self:?}")));
                }
                if kernel % 2 == 0 {
                    return Err(Config(format!("conv kernel must be odd, got {kernel}")));
                }
            }
            LayerSpec::FullyConnected { n_out: 0 } => {
                return Err(Config("fully connected layer with zero outputs".into()))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Config(format!("dropout rate {rate} outside [0, 1)")))
            }
            LayerSpec::Upsample { factor: 0 } => {
                return Err(Config("upsample factor must be positive".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite<F: Scalar>(a: &ArrayD<F>, what: &str) -> crate::Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::FormError::Numeric(format!("non-finite values after {what}")))
    }
}
