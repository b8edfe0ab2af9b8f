//! Minimal sequential network engine: shape checking, forward with channel
//! masks, analytical backward and Nesterov SGD.

mod loss;
mod ops;
mod optim;

pub use loss::{argmax, cross_entropy, softmax, softmax_rows};
pub use ops::{backward, forward, ForwardCache, ForwardPass};
pub use optim::OptimizerState;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        features: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat { features } => features,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Geometry of one parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    /// Index into `Architecture::layers`.
    pub layer: usize,
    /// Output units (dense) or output channels (conv).
    pub out_channels: usize,
    /// Length of one weight row: all incoming weights of one output channel.
    pub row_len: usize,
}

impl ParamSlot {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.row_len
    }
}

/// A validated chain of layers. The final layer is always the dense
/// classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureDef", into = "ArchitectureDef")]
pub struct Architecture {
    input: InputShape,
    layers: Vec<LayerSpec>,
    shapes: Vec<InputShape>,
    slots: Vec<ParamSlot>,
    head_feature_group: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDef {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl TryFrom<ArchitectureDef> for Architecture {
    type Error = Error;

    fn try_from(def: ArchitectureDef) -> Result<Self> {
        Architecture::new(def.input, def.layers)
    }
}

impl From<Architecture> for ArchitectureDef {
    fn from(arch: Architecture) -> Self {
        ArchitectureDef {
            input: arch.input,
            layers: arch.layers,
        }
    }
}

impl Architecture {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Shape("input shape has zero size".into()));
        }
        let mut shapes = vec![input];
        let mut slots = Vec::new();
        let mut current = input;
        for (idx, layer) in layers.iter().enumerate() {
            let next = match (*layer, current) {
                (LayerSpec::Dense { in_units, out_units }, InputShape::Flat { features }) => {
                    if in_units != features {
                        return Err(Error::Shape(format!(
                            "layer {idx}: dense expects {in_units} inputs, previous layer yields {features}"
                        )));
                    }
                    if out_units == 0 {
                        return Err(Error::Shape(format!("layer {idx}: dense with zero outputs")));
                    }
                    slots.push(ParamSlot {
                        layer: idx,
                        out_channels: out_units,
                        row_len: in_units,
                    });
                    InputShape::Flat { features: out_units }
                }
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel_size,
                        stride,
                    },
                    InputShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if in_channels != channels {
                        return Err(Error::Shape(format!(
                            "layer {idx}: conv2d expects {in_channels} channels, got {channels}"
                        )));
                    }
                    if kernel_size == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::Shape(format!("layer {idx}: degenerate conv2d")));
                    }
                    if kernel_size > height || kernel_size > width {
                        return Err(Error::Shape(format!(
                            "layer {idx}: kernel {kernel_size} exceeds {height}x{width} input"
                        )));
                    }
                    slots.push(ParamSlot {
                        layer: idx,
                        out_channels,
                        row_len: in_channels * kernel_size * kernel_size,
                    });
                    InputShape::Image {
                        channels: out_channels,
                        height: (height - kernel_size) / stride + 1,
                        width: (width - kernel_size) / stride + 1,
                    }
                }
                (
                    LayerSpec::MaxPool2d { window, stride },
                    InputShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if window == 0 || stride == 0 || window > height || window > width {
                        return Err(Error::Shape(format!(
                            "layer {idx}: pooling window {window} invalid for {height}x{width}"
                        )));
                    }
                    InputShape::Image {
                        channels,
                        height: (height - window) / stride + 1,
                        width: (width - window) / stride + 1,
                    }
                }
                (LayerSpec::Relu, shape) => shape,
                (LayerSpec::Flatten, shape) => InputShape::Flat {
                    features: shape.len(),
                },
                (layer, shape) => {
                    return Err(Error::Shape(format!(
                        "layer {idx}: {layer:?} cannot consume {shape:?}"
                    )))
                }
            };
            shapes.push(next);
            current = next;
        }

        if !matches!(layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::Shape(
                "the final layer must be the dense classifier head".into(),
            ));
        }
        let hidden = &slots[..slots.len() - 1];
        if let Some(narrow) = hidden.iter().find(|s| s.out_channels < 2) {
            return Err(Error::Shape(format!(
                "layer {}: partitionable layers need at least 2 output channels",
                narrow.layer
            )));
        }
        // Each hidden channel of the last hidden layer feeds a contiguous
        // group of head inputs (one entry for dense, H*W after flatten).
        let head_in = slots.last().map(|s| s.row_len).unwrap_or(0);
        let head_feature_group = match hidden.last() {
            Some(last) => {
                if head_in % last.out_channels != 0 {
                    return Err(Error::Shape(
                        "head inputs are not an integer multiple of the last hidden width".into(),
                    ));
                }
                head_in / last.out_channels
            }
            None => 0,
        };

        Ok(Architecture {
            input,
            layers,
            shapes,
            slots,
            head_feature_group,
        })
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Activation shape entering layer `idx`; `shape_at(layers.len())` is the logits shape.
    pub fn shape_at(&self, idx: usize) -> InputShape {
        self.shapes[idx]
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Parametric layers whose output channels can be partitioned: every
    /// parametric layer except the classifier head.
    pub fn hidden_slots(&self) -> &[ParamSlot] {
        &self.slots[..self.slots.len() - 1]
    }

    pub fn head(&self) -> &ParamSlot {
        self.slots.last().expect("validated architecture has a head")
    }

    pub fn num_classes(&self) -> usize {
        self.head().out_channels
    }

    /// Number of head inputs owned by each channel of the last hidden layer.
    pub fn head_feature_group(&self) -> usize {
        self.head_feature_group
    }

    pub fn zeros(&self) -> ModelParams {
        ModelParams {
            layers: self
                .slots
                .iter()
                .map(|s| LayerParams {
                    weight: vec![0.0; s.weight_len()],
                    bias: vec![0.0; s.out_channels],
                })
                .collect(),
        }
    }

    /// Kaiming-uniform fan-in initialisation. Biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual companion rule.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut params = self.zeros();
        for (slot, layer) in self.slots.iter().zip(params.layers.iter_mut()) {
            let fan_in = slot.row_len as f64;
            let bound = (6.0 / fan_in).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            let bias_bound = fan_in.sqrt().recip();
            for b in layer.bias.iter_mut() {
                *b = rng.random_range(-bias_bound..bias_bound);
            }
        }
        params
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.layers.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "expected {} parametric layers, found {}",
                self.slots.len(),
                params.layers.len()
            )));
        }
        for (i, (slot, layer)) in self.slots.iter().zip(&params.layers).enumerate() {
            if layer.weight.len() != slot.weight_len() || layer.bias.len() != slot.out_channels {
                return Err(Error::Shape(format!("parametric layer {i} has the wrong shape")));
            }
        }
        Ok(())
    }

    pub fn full_mask(&self) -> ForwardMask {
        ForwardMask {
            active: self.slots.iter().map(|s| vec![true; s.out_channels]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weights and biases of every parametric layer in canonical layer order.
/// Gradients and momentum buffers share this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

pub type ParamGrads = ModelParams;

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Tensors in canonical order: weight then bias of each layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_entries(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len())
    }
}

/// Active output channels per parametric layer. Inactive channels produce a
/// constant zero activation and receive no gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardMask {
    pub active: Vec<Vec<bool>>,
}

impl ForwardMask {
    /// True when some hidden layer has no active channel, so the output
    /// cannot depend on the input.
    pub fn is_disconnected(&self) -> bool {
        let hidden = self.active.len().saturating_sub(1);
        self.active[..hidden].iter().any(|l| !l.iter().any(|&a| a))
    }

    pub(crate) fn check(&self, arch: &Architecture) -> Result<()> {
        if self.active.len() != arch.slots.len()
            || self
                .active
                .iter()
                .zip(&arch.slots)
                .any(|(m, s)| m.len() != s.out_channels)
        {
            return Err(Error::Shape("forward mask does not match the architecture".into()));
        }
        if !self.active.last().map(|h| h.iter().all(|&a| a)).unwrap_or(false) {
            return Err(Error::Shape("classifier outputs cannot be masked".into()));
        }
        Ok(())
    }
}
