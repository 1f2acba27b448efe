//! Small differentiable network stack: dense, same-padded conv, residual and
//! non-local blocks with optional weight normalisation, reverse-mode
//! gradients with respect to parameters and inputs, and Adam.

pub mod adam;
pub mod checkpoint;
mod layers;
mod network;
mod scalar;
mod spec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::WeightBlock;
pub use network::{
    build_discriminator, build_generator, build_mlp, orthogonal, Gradients, Network, Trace,
};
pub use scalar::{Dual, Scalar};
pub use spec::{Attention, DiscSpec, GenSpec, LayerSpec, MlpSpec, NetworkSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor; the first axis is the batch where relevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape {
                expected: shape,
                got: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("tensor has non-finite values".into()));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
