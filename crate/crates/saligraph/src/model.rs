//! Sequential model container, the cached forward pass, the MiniVGG
//! builders and cascading parameter randomization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layer::{apply_layer, LayerSpec};
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized parameters.
pub const INIT_STD: f64 = 0.05;
/// Standard deviation used when reinitializing layers during the
/// randomization sanity check.
pub const RANDOMIZE_STD: f64 = 0.01;

/// An ordered list of layers ending in an affine head, plus the labels
/// (`B1`, `B2`, ...) of each convolution block's final conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    block_index: Vec<(String, usize)>,
    class_count: usize,
}

impl Model {
    pub fn new(
        layers: Vec<LayerSpec>,
        block_index: Vec<(String, usize)>,
        class_count: usize,
        input_shape: &[usize],
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        match layers.last() {
            Some(LayerSpec::Affine { weights, .. }) if weights.shape()[0] == class_count => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "final layer must be an Affine with class_count outputs".into(),
                ))
            }
        }
        // Check the layers compose over the declared input shape.
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::shape(format!("layer {i} ({})", layer.kind()), e.to_string())
            })?;
        }
        let mut prev = None;
        for (i, (label, idx)) in block_index.iter().enumerate() {
            if label != &format!("B{}", i + 1) {
                return Err(Error::InvalidArgument(format!(
                    "block labels must be B1..Bn in order, got {label}"
                )));
            }
            if !matches!(layers.get(*idx), Some(LayerSpec::Conv2d { .. })) {
                return Err(Error::InvalidArgument(format!(
                    "block {label} must point at a conv layer, got index {idx}"
                )));
            }
            if let Some(p) = prev {
                if *idx <= p {
                    return Err(Error::InvalidArgument(
                        "block indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(*idx);
        }
        Ok(Model { layers, block_index, class_count })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Block labels in network order.
    pub fn block_labels(&self) -> Vec<&str> {
        self.block_index.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn block_entries(&self) -> &[(String, usize)] {
        &self.block_index
    }

    /// Layer index of the named block's final convolution.
    pub fn block_conv_index(&self, label: &str) -> Result<usize> {
        self.block_index
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, i)| *i)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown block label {label}; model has {:?}",
                    self.block_labels()
                ))
            })
    }

    /// Layer whose output is the block's activation map: the ReLU right
    /// after the block's final conv when present, else the conv itself.
    pub fn block_activation_index(&self, label: &str) -> Result<usize> {
        let conv = self.block_conv_index(label)?;
        match self.layers.get(conv + 1) {
            Some(LayerSpec::Relu) => Ok(conv + 1),
            _ => Ok(conv),
        }
    }

    /// Indices of parametric (conv/affine) layers, in network order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parametric())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.parameters())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<LayerSpec> {
        &mut self.layers
    }
}

/// Cached activations from one forward pass: the input plus every layer's
/// output, so `outputs[l]` is layer `l`'s post-activation and layer
/// `l + 1`'s input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    outputs: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer]
    }

    pub fn layer_input(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("trace has at least one layer")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Runs the model on one input, caching every intermediate activation.
pub fn forward(model: &Model, input: &Tensor) -> Result<ForwardTrace> {
    let mut outputs = Vec::with_capacity(model.layers().len());
    let mut current = input.clone();
    for (i, layer) in model.layers().iter().enumerate() {
        let next = apply_layer(&current, layer).map_err(|e| {
            Error::shape(format!("layer {i} ({})", layer.kind()), e.to_string())
        })?;
        outputs.push(next.clone());
        current = next;
    }
    Ok(ForwardTrace { input: input.clone(), outputs })
}

/// Convenience: forward pass and argmax class of the logits.
pub fn predict(model: &Model, input: &Tensor) -> Result<(ForwardTrace, usize)> {
    let trace = forward(model, input)?;
    let class = argmax_index(trace.logits().data());
    Ok((trace, class))
}

pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Round every value to the nearest f32, so parameters survive the 32-bit
/// weights file bit-for-bit.
fn quantize_f32(data: Vec<f64>) -> Vec<f64> {
    data.into_iter().map(|v| v as f32 as f64).collect()
}

fn draw_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape, quantize_f32(data))
}

/// Builds the desk-scale VGG-style convnet: per block Conv-ReLU-Conv-ReLU-MaxPool,
/// then Flatten and an affine head. Parameters are drawn from N(0, 0.05^2)
/// with the given seed.
pub fn build_minivgg(
    channels_per_block: &[usize],
    input_extent: usize,
    in_channels: usize,
    class_count: usize,
    seed: u64,
) -> Result<Model> {
    if channels_per_block.len() < 2 {
        return Err(Error::InvalidArgument(
            "MiniVGG needs at least 2 blocks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut block_index = Vec::new();
    let mut ch = in_channels;
    let mut extent = input_extent;
    for (b, &out_ch) in channels_per_block.iter().enumerate() {
        for half in 0..2 {
            let weights = draw_tensor(vec![out_ch, ch, 3, 3], INIT_STD, &mut rng);
            let bias = draw_tensor(vec![out_ch], INIT_STD, &mut rng);
            layers.push(LayerSpec::conv2d(weights, bias, 1, 1)?);
            if half == 1 {
                block_index.push((format!("B{}", b + 1), layers.len() - 1));
            }
            layers.push(LayerSpec::Relu);
            ch = out_ch;
        }
        layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        extent /= 2;
        if extent < 1 {
            return Err(Error::InvalidArgument(format!(
                "spatial extent collapsed below 1 after block {}",
                b + 1
            )));
        }
    }
    layers.push(LayerSpec::Flatten);
    let head_in = ch * extent * extent;
    let weights = draw_tensor(vec![class_count, head_in], INIT_STD, &mut rng);
    let bias = draw_tensor(vec![class_count], INIT_STD, &mut rng);
    layers.push(LayerSpec::affine(weights, bias)?);
    Model::new(
        layers,
        block_index,
        class_count,
        &[in_channels, input_extent, input_extent],
    )
}

/// Default desk-scale configuration: 4 blocks of (8, 16, 32, 32) channels
/// on 32x32 single-channel input, 4 classes.
pub fn default_minivgg(seed: u64) -> Model {
    build_minivgg(&[8, 16, 32, 32], 32, 1, 4, seed).expect("default config is valid")
}

/// MiniVGG variant whose head is a global average pool (expressed as a
/// fixed averaging affine) followed by the class affine. The last block
/// has no max-pool, so the labelled activation is exactly the pooled
/// feature map and the model admits a CAM reading.
pub fn build_minivgg_gap(
    channels_per_block: &[usize],
    input_extent: usize,
    in_channels: usize,
    class_count: usize,
    seed: u64,
) -> Result<Model> {
    if channels_per_block.len() < 2 {
        return Err(Error::InvalidArgument(
            "MiniVGG needs at least 2 blocks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut block_index = Vec::new();
    let mut ch = in_channels;
    let mut extent = input_extent;
    let last = channels_per_block.len() - 1;
    for (b, &out_ch) in channels_per_block.iter().enumerate() {
        for half in 0..2 {
            let weights = draw_tensor(vec![out_ch, ch, 3, 3], INIT_STD, &mut rng);
            let bias = draw_tensor(vec![out_ch], INIT_STD, &mut rng);
            layers.push(LayerSpec::conv2d(weights, bias, 1, 1)?);
            if half == 1 {
                block_index.push((format!("B{}", b + 1), layers.len() - 1));
            }
            layers.push(LayerSpec::Relu);
            ch = out_ch;
        }
        if b != last {
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            extent /= 2;
            if extent < 1 {
                return Err(Error::InvalidArgument(format!(
                    "spatial extent collapsed below 1 after block {}",
                    b + 1
                )));
            }
        }
    }
    layers.push(LayerSpec::Flatten);
    // Global average pool as an affine: row k averages channel k's units.
    let units = extent * extent;
    let mut gap = vec![0.0; ch * ch * units];
    let inv = 1.0 / units as f64;
    for k in 0..ch {
        for u in 0..units {
            gap[k * ch * units + k * units + u] = inv;
        }
    }
    layers.push(LayerSpec::affine(
        Tensor::from_parts(vec![ch, ch * units], gap),
        Tensor::zeros(vec![ch]),
    )?);
    let weights = draw_tensor(vec![class_count, ch], INIT_STD, &mut rng);
    let bias = draw_tensor(vec![class_count], INIT_STD, &mut rng);
    layers.push(LayerSpec::affine(weights, bias)?);
    Model::new(
        layers,
        block_index,
        class_count,
        &[in_channels, input_extent, input_extent],
    )
}

/// Reinitializes the last `stages` parametric layers (counted from the
/// output side) from N(0, 0.01^2), weights and biases both. The draw
/// order runs from the output side, so two calls with the same seed and
/// different stage counts agree on the layers they both redraw.
pub fn randomize_cascading(model: &Model, stages: usize, seed: u64) -> Result<Model> {
    let parametric = model.parametric_layers();
    if stages > parametric.len() {
        return Err(Error::InvalidArgument(format!(
            "stages {stages} out of range; model has {} parametric layers",
            parametric.len()
        )));
    }
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &idx in parametric.iter().rev().take(stages) {
        let layer = &mut out.layers_mut()[idx];
        match layer {
            LayerSpec::Conv2d { weights, bias, .. } | LayerSpec::Affine { weights, bias } => {
                *weights = draw_tensor(weights.shape().to_vec(), RANDOMIZE_STD, &mut rng);
                *bias = draw_tensor(bias.shape().to_vec(), RANDOMIZE_STD, &mut rng);
            }
            _ => unreachable!("parametric_layers only returns conv/affine"),
        }
    }
    Ok(out)
}
