//! The classification module: a plain strided CNN that yields one feature
//! grid per stage and class logits from a global-average-pooled head.
//!
//! Layout, for `channels = [c1, .., cS]`:
//!
//! ```text
//! stem      conv3x3 (3 -> c1, stem_stride) + ReLU
//! stage s   conv3x3 (c_{s-1} -> c_s, stage_strides[s]) + ReLU
//!           conv3x3 (c_s -> c_s, 1) + ReLU          => feature grid s
//! head      global average pool -> dense (cS -> classes)
//! ```
//!
//! All convolutions use `Same` padding. The default 64x64 configuration
//! produces 16x16, 8x8 and 4x4 grids.

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, Padding, Tensor, Var};

const KERNEL: usize = 3;
/// Subtracted from every input value, mapping `[0, 1]` to `[-0.5, 0.5]`.
pub const INPUT_CENTER: f64 = 0.5;
/// Rng stream used for backbone initialization; head streams are distinct.
const INIT_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Side of the square RGB input.
    pub input_size: usize,
    /// Output channels of each stage; the stem uses `channels[0]`.
    pub channels: Vec<usize>,
    pub stem_stride: usize,
    pub stage_strides: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 64],
            stem_stride: 2,
            stage_strides: vec![2, 2, 2],
            num_classes: 8,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::contract("backbone needs at least one stage with nonzero channels"));
        }
        if self.channels.len() != self.stage_strides.len() {
            return Err(Error::contract(format!(
                "{} stage channel counts but {} stage strides",
                self.channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::contract("class count must be positive"));
        }
        if self.stem_stride == 0 || self.stage_strides.contains(&0) {
            return Err(Error::contract("strides must be at least 1"));
        }
        if self.input_size == 0 {
            return Err(Error::contract("input size must be positive"));
        }
        Ok(())
    }

    /// Grid side of each stage's feature map.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.input_size.div_ceil(self.stem_stride);
        self.stage_strides
            .iter()
            .map(|&s| {
                side = side.div_ceil(s);
                side
            })
            .collect()
    }

    /// Index of the stage whose grid has side `side`.
    pub fn stage_index(&self, side: usize) -> Result<usize> {
        self.stage_sides()
            .iter()
            .position(|&s| s == side)
            .ok_or_else(|| {
                Error::contract(format!(
                    "no stage with a {side}x{side} grid (available: {:?})",
                    self.stage_sides()
                ))
            })
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels[stage]
    }

    /// Exact number of learnable scalars in the backbone.
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(Layer::parameter_count).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = vec![Layer::conv("stem", 3, self.channels[0])];
        let mut prev = self.channels[0];
        for (s, &c) in self.channels.iter().enumerate() {
            layers.push(Layer::conv(&format!("stage{}.conv1", s + 1), prev, c));
            layers.push(Layer::conv(&format!("stage{}.conv2", s + 1), c, c));
            prev = c;
        }
        layers.push(Layer {
            name: "classifier".into(),
            weight_shape: vec![prev, self.num_classes],
            fan_in: prev,
        });
        layers
    }
}

struct Layer {
    name: String,
    weight_shape: Vec<usize>,
    fan_in: usize,
}

impl Layer {
    fn conv(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            weight_shape: vec![KERNEL, KERNEL, cin, cout],
            fan_in: KERNEL * KERNEL * cin,
        }
    }

    fn bias_len(&self) -> usize {
        *self.weight_shape.last().expect("weight has a shape")
    }

    fn parameter_count(&self) -> usize {
        self.weight_shape.iter().product::<usize>() + self.bias_len()
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Fresh backbone parameters: fan-in scaled uniform weights, zero biases.
pub fn init_params(config: &BackboneConfig) -> Result<Params> {
    config.validate()?;
    let mut rng = Rng::with_stream(config.seed, INIT_STREAM);
    let mut params = Params::new();
    for layer in config.layers() {
        params.insert(
            weight_name(&layer.name),
            fan_in_uniform(&layer.weight_shape, layer.fan_in, &mut rng),
        );
        params.insert(bias_name(&layer.name), Tensor::zeros(&[layer.bias_len()]));
    }
    Ok(params)
}

/// True for tensors that belong to the backbone (everything inference reads).
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("stem.") || name.starts_with("stage") || name.starts_with("classifier.")
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Post-ReLU feature grid of each evaluated stage, `[N, N, C]`.
    pub stages: Vec<Var>,
    /// Present only when every stage was evaluated.
    pub logits: Option<Var>,
}

/// Shared conv + bias + ReLU block.
fn conv_block(g: &mut Graph, p: &Bound, layer: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&weight_name(layer))?;
    let b = p.var(&bias_name(layer))?;
    let y = g.conv2d(x, w, stride, Padding::Same)?;
    let y = g.add(y, b)?;
    Ok(g.relu(y))
}

/// Runs the backbone on an `[H, W, 3]` image leaf.
///
/// With `last_stage = Some(s)` evaluation stops after stage `s` and no logits
/// are produced; this is how positive images are processed.
pub fn forward(
    g: &mut Graph,
    config: &BackboneConfig,
    params: &Bound,
    image: Var,
    last_stage: Option<usize>,
) -> Result<BackboneOutput> {
    let shape = g.shape(image);
    if shape != [config.input_size, config.input_size, 3] {
        return Err(Error::shape(
            "backbone",
            format!(
                "expected a {0}x{0}x3 image, got {shape:?}",
                config.input_size
            ),
        ));
    }
    let last = last_stage.unwrap_or(config.channels.len() - 1);
    let offset = g.constant(Tensor::scalar(-INPUT_CENTER));
    let centered = g.add(image, offset)?;
    let mut x = conv_block(g, params, "stem", centered, config.stem_stride)?;
    let mut stages = Vec::with_capacity(last + 1);
    for s in 0..=last {
        x = conv_block(g, params, &format!("stage{}.conv1", s + 1), x, config.stage_strides[s])?;
        x = conv_block(g, params, &format!("stage{}.conv2", s + 1), x, 1)?;
        stages.push(x);
    }
    let logits = if last + 1 == config.channels.len() {
        let pooled = g.global_avg_pool(x)?;
        let w = params.var(&weight_name("classifier"))?;
        let b = params.var(&bias_name("classifier"))?;
        Some(g.dense(pooled, w, b)?)
    } else {
        None
    };
    Ok(BackboneOutput { stages, logits })
}

/// Mean of `-l . log softmax(logits)` over a batch.
pub fn classification_loss(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} logit vectors vs {} labels", logits.len(), labels.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&z, &label) in logits.iter().zip(labels) {
        let k = g.shape(z)[0];
        if label >= k {
            return Err(Error::shape(
                "classification_loss",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let mut onehot = vec![0.0; k];
        onehot[label] = 1.0;
        let l = g.softmax_cross_entropy(z, &onehot)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}

/// Index of the largest logit; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// An `N x N x C` feature map outside of any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    tensor: Tensor,
}

impl FeatureGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::shape("feature_grid", format!("expected [N, N, C], got {s:?}")));
        }
        Ok(Self { tensor })
    }

    pub fn from_cells(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![n, n, c], data)?)
    }

    pub fn side(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Feature vector of cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels();
        &self.tensor.data()[(i * self.side() + j) * c..][..c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
}
