use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Softmax,
    /// Every position attends to every other with weight 1/N.
    Uniform,
}

/// One entry of a layer plan. Shapes are inferred along the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        out: usize,
        weight_norm: bool,
    },
    /// Same-padded stride-1 convolution over [C, H, W]. Even kernels pad one
    /// less before than after.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        weight_norm: bool,
    },
    /// `body(x) + shortcut(x)`; the shortcut is a 1x1 convolution when the
    /// body changes the channel count and the identity otherwise.
    Residual {
        body: Vec<LayerSpec>,
        weight_norm: bool,
    },
    /// Dot-product self-attention over spatial positions with 1x1 query, key,
    /// value and output projections, added back to the input.
    NonLocal {
        inner: usize,
        attention: Attention,
        weight_norm: bool,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Tanh,
    Softmax,
    /// Plain dense map of the flattened input to one real value.
    LinearLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub latent_dim: usize,
    /// Output patch height (frames) and width (frequency bands).
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub kernel: usize,
    /// Channel counts of the non-local reduction head, starting at `channels`
    /// and ending at 1.
    pub reduction: Vec<usize>,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            height: 32,
            width: 32,
            channels: 16,
            res_blocks: 4,
            kernel: 4,
            reduction: vec![16, 4, 1],
        }
    }
}

impl GenSpec {
    pub fn output_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.reduction.first() != Some(&self.channels) || self.reduction.last() != Some(&1) {
            return Err(Error::Config(format!(
                "generator reduction {:?} must run from {} channels down to 1",
                self.reduction, self.channels
            )));
        }
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut layers = vec![
            LayerSpec::Dense {
                out: c * h * w,
                weight_norm: true,
            },
            LayerSpec::Reshape {
                shape: vec![c, h, w],
            },
            LayerSpec::Tanh,
        ];
        for _ in 0..self.res_blocks {
            layers.push(residual(c, self.kernel));
            layers.push(LayerSpec::Tanh);
        }
        for pair in self.reduction.windows(2) {
            layers.push(LayerSpec::NonLocal {
                inner: pair[1],
                attention: Attention::Softmax,
                weight_norm: true,
            });
            layers.push(LayerSpec::Conv2d {
                out_channels: pair[1],
                kernel: 1,
                weight_norm: true,
            });
            layers.push(LayerSpec::Tanh);
        }
        Ok(NetworkSpec {
            input_shape: vec![self.latent_dim],
            layers,
        })
    }
}

fn residual(out: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Residual {
        body: vec![
            LayerSpec::Conv2d {
                out_channels: out,
                kernel,
                weight_norm: true,
            },
            LayerSpec::Tanh,
            LayerSpec::Conv2d {
                out_channels: out,
                kernel,
                weight_norm: true,
            },
        ],
        weight_norm: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub kernel: usize,
    /// Number of trailing single-channel 3x3 convolutions.
    pub tail_convs: usize,
}

impl Default for DiscSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 2,
            res_blocks: 2,
            kernel: 4,
            tail_convs: 2,
        }
    }
}

impl DiscSpec {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut layers = Vec::new();
        for _ in 0..self.res_blocks {
            layers.push(residual(self.channels, self.kernel));
            layers.push(LayerSpec::Tanh);
        }
        for _ in 0..self.tail_convs {
            layers.push(LayerSpec::Conv2d {
                out_channels: 1,
                kernel: 3,
                weight_norm: true,
            });
            layers.push(LayerSpec::Tanh);
        }
        layers.push(LayerSpec::LinearLogit);
        Ok(NetworkSpec {
            input_shape: self.input_shape(),
            layers,
        })
    }
}

/// Fully connected tanh network. With `logit_head` the last layer is a
/// [`LayerSpec::LinearLogit`] and `output_dim` must be 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub weight_norm: bool,
    pub logit_head: bool,
}

impl MlpSpec {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.logit_head && self.output_dim != 1 {
            return Err(Error::Config("a logit head has exactly one output".into()));
        }
        let mut layers = Vec::new();
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                out: h,
                weight_norm: self.weight_norm,
            });
            layers.push(LayerSpec::Tanh);
        }
        layers.push(if self.logit_head {
            LayerSpec::LinearLogit
        } else {
            LayerSpec::Dense {
                out: self.output_dim,
                weight_norm: self.weight_norm,
            }
        });
        Ok(NetworkSpec {
            input_shape: vec![self.input_dim],
            layers,
        })
    }
}
