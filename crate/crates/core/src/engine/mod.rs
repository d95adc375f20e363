//! Feed-forward CNN training with quantized weights, activations and
//! gradients.
//!
//! A network is a linear chain of [`Node`]s built from a [`ModelSpec`] and a
//! [`QConfig`]. Each convolution or fully connected layer expands to
//!
//! ```text
//! conv -> grad_quant -> batchnorm -> clamp -> act_quant -> [maxpool]
//! fc   -> grad_quant -> loss
//! ```
//!
//! `grad_quant` is the identity on the forward pass and quantizes the
//! gradient of the layer output on the backward pass, before it reaches both
//! the input-gradient and weight-gradient products. Products whose operands
//! are both quantized run on the bit-plane kernels.

mod checkpoint;
mod network;
mod ops;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    BackwardOptions, BackwardOutput, BackwardSchedule, ForwardCache, Mode, Network, Node, NodeKind,
};
pub use ops::{
    bounded_activation, bounded_activation_backward, conv2d_backward_input, conv2d_backward_weight,
    conv2d_forward, fc_backward_input, fc_backward_weight, fc_forward, maxpool_backward,
    maxpool_forward, softmax_cross_entropy, Codes, ConvGeom, Operand,
};
pub use optim::{adam_update, AdamConfig};
pub use train::{accuracy, batch_slice, evaluate, predictions, train_step, TrainState, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::quant::Precision;

/// Bitwidths for weights, activations and gradients plus the first/last
/// layer exemptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QConfig {
    pub weights: Precision,
    pub activations: Precision,
    pub gradients: Precision,
    /// Quantize the first convolution's weights and gradients.
    pub quantize_first: bool,
    /// Quantize the last fully connected layer's inputs and weights.
    pub quantize_last: bool,
}

impl QConfig {
    pub fn new(w: u32, a: u32, g: u32) -> Result<Self> {
        Ok(Self {
            weights: Precision::from_width(w)?,
            activations: Precision::from_width(a)?,
            gradients: Precision::from_width(g)?,
            quantize_first: false,
            quantize_last: false,
        })
    }

    pub fn full() -> Self {
        Self {
            weights: Precision::Full,
            activations: Precision::Full,
            gradients: Precision::Full,
            quantize_first: false,
            quantize_last: false,
        }
    }

    pub fn with_first(mut self, on: bool) -> Self {
        self.quantize_first = on;
        self
    }

    pub fn with_last(mut self, on: bool) -> Self {
        self.quantize_last = on;
        self
    }

    /// `(W, A, G)` widths with 32 meaning full precision.
    pub fn widths(&self) -> (u32, u32, u32) {
        (
            self.weights.width(),
            self.activations.width(),
            self.gradients.width(),
        )
    }
}

impl fmt::Display for QConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (w, a, g) = self.widths();
        write!(f, "({w},{a},{g})")?;
        if self.quantize_first {
            write!(f, "+first")?;
        }
        if self.quantize_last {
            write!(f, "+last")?;
        }
        Ok(())
    }
}

/// One entry of a model description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Stride-1 convolution with "same" padding, followed by batchnorm and
    /// the bounded activation.
    Conv { out_channels: usize, kernel: usize },
    /// Non-overlapping max pooling after the preceding convolution block.
    Pool { window: usize },
    /// Final fully connected layer producing class logits.
    Fc,
}

/// Layer list, written as e.g. `conv:16:3,pool:2,conv:32:3,fc`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 || self.layers[n - 1] != LayerSpec::Fc {
            return Err(Error::InvalidModel("model must end with fc".into()));
        }
        let mut prev: Option<LayerSpec> = None;
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Fc if i != n - 1 => {
                    return Err(Error::InvalidModel("fc is only supported as the last layer".into()))
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    if out_channels == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::InvalidModel(format!(
                            "conv needs positive channels and an odd kernel, got {out_channels}:{kernel}"
                        )));
                    }
                }
                LayerSpec::Pool { window } => {
                    if window == 0 || !matches!(prev, Some(LayerSpec::Conv { .. })) {
                        return Err(Error::InvalidModel(
                            "pool must directly follow a conv with window >= 1".into(),
                        ));
                    }
                }
                LayerSpec::Fc => {}
            }
            prev = Some(*l);
        }
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => format!("conv:{out_channels}:{kernel}"),
                LayerSpec::Pool { window } => format!("pool:{window}"),
                LayerSpec::Fc => "fc".to_string(),
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |p: &str| Error::InvalidModel(format!("cannot parse layer '{p}'"));
        let mut layers = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(':').collect();
            let num = |i: usize| -> Result<usize> {
                fields
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(part))
            };
            let layer = match fields[0] {
                "conv" if fields.len() == 3 => LayerSpec::Conv {
                    out_channels: num(1)?,
                    kernel: num(2)?,
                },
                "pool" if fields.len() == 2 => LayerSpec::Pool { window: num(1)? },
                "fc" if fields.len() == 1 => LayerSpec::Fc,
                _ => return Err(bad(part)),
            };
            layers.push(layer);
        }
        ModelSpec::new(layers)
    }
}
