//! Weights-directory format: `arch.json` describes the layer stack and
//! where each tensor lives inside `weights.bin` (f32 little-endian,
//! row-major, weights before bias per layer). Values are upcast to f64 on
//! load; since in-memory parameters are kept f32-representable, a
//! save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::model::Model;
use crate::tensor::Tensor;

pub const ARCH_FILE: &str = "arch.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_NAME: &str = "saligraph-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchFile {
    format: String,
    version: u32,
    class_count: usize,
    input_shape: Vec<usize>,
    block_index: Vec<BlockEntry>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    label: String,
    layer: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        weight_shape: Vec<usize>,
        stride: usize,
        padding: usize,
        weights: Blob,
        bias: Blob,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Affine {
        weight_shape: Vec<usize>,
        weights: Blob,
        bias: Blob,
    },
}

/// Byte range of one tensor inside `weights.bin`.
#[derive(Debug, Serialize, Deserialize)]
struct Blob {
    offset: usize,
    byte_len: usize,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, tensor: &Tensor) -> Blob {
        let offset = self.bytes.len();
        for &v in tensor.data() {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Blob { offset, byte_len: tensor.len() * 4 }
    }
}

fn read_blob(bytes: &[u8], blob: &Blob, shape: &[usize], what: &str) -> Result<Tensor> {
    let expected: usize = shape.iter().product::<usize>() * 4;
    if blob.byte_len != expected {
        return Err(Error::ModelFormat(format!(
            "{what}: header declares {} bytes but shape {shape:?} needs {expected}",
            blob.byte_len
        )));
    }
    let end = blob.offset.checked_add(blob.byte_len).ok_or_else(|| {
        Error::ModelFormat(format!("{what}: blob range overflows"))
    })?;
    if end > bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{what}: blob [{}, {end}) extends past weights.bin ({} bytes); truncated file?",
            blob.offset,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[blob.offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::ModelFormat(format!("{what}: non-finite parameter value")));
    }
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Infers the input shape a loaded model expects. Stored in arch.json so
/// the loader can re-validate layer composition.
fn infer_input_shape(model: &Model) -> Vec<usize> {
    match model.layers().first() {
        Some(LayerSpec::Conv2d { weights, .. }) => {
            // Extent is not recoverable from the conv alone; the caller
            // stores it. This helper only covers the builders' models.
            vec![weights.shape()[1]]
        }
        Some(LayerSpec::Affine { weights, .. }) => vec![weights.shape()[1]],
        _ => vec![],
    }
}

/// Writes `arch.json` and `weights.bin` into `dir` (created if missing).
pub fn save_model(model: &Model, dir: &Path, input_shape: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut writer = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::new();
    for layer in model.layers() {
        layers.push(match layer {
            LayerSpec::Conv2d { weights, bias, stride, padding } => LayerEntry::Conv2d {
                weight_shape: weights.shape().to_vec(),
                stride: *stride,
                padding: *padding,
                weights: writer.push(weights),
                bias: writer.push(bias),
            },
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::MaxPool { kernel, stride } => LayerEntry::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::Flatten => LayerEntry::Flatten,
            LayerSpec::Affine { weights, bias } => LayerEntry::Affine {
                weight_shape: weights.shape().to_vec(),
                weights: writer.push(weights),
                bias: writer.push(bias),
            },
        });
    }
    let arch = ArchFile {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        class_count: model.class_count(),
        input_shape: if input_shape.is_empty() {
            infer_input_shape(model)
        } else {
            input_shape.to_vec()
        },
        block_index: model
            .block_entries()
            .iter()
            .map(|(label, layer)| BlockEntry { label: label.clone(), layer: *layer })
            .collect(),
        layers,
    };
    let json = serde_json::to_string_pretty(&arch)
        .map_err(|e| Error::ModelFormat(e.to_string()))?;
    fs::write(dir.join(ARCH_FILE), json + "\n")?;
    fs::write(dir.join(WEIGHTS_FILE), writer.bytes)?;
    Ok(())
}

/// Loads a model from a weights directory.
pub fn load_model(dir: &Path) -> Result<Model> {
    let arch_text = fs::read_to_string(dir.join(ARCH_FILE))
        .map_err(|e| Error::ModelFormat(format!("cannot read {ARCH_FILE}: {e}")))?;
    let weights = fs::read(dir.join(WEIGHTS_FILE))
        .map_err(|e| Error::ModelFormat(format!("cannot read {WEIGHTS_FILE}: {e}")))?;
    load_model_from_parts(&arch_text, &weights)
}

/// Loads a model from in-memory copies of `arch.json` and `weights.bin`
/// (used by embedded deployments that bundle the files).
pub fn load_model_from_parts(arch_json: &str, weights_bin: &[u8]) -> Result<Model> {
    let arch: ArchFile = serde_json::from_str(arch_json)
        .map_err(|e| Error::ModelFormat(format!("malformed {ARCH_FILE}: {e}")))?;
    if arch.format != FORMAT_NAME {
        return Err(Error::ModelFormat(format!(
            "unexpected format marker {:?}",
            arch.format
        )));
    }
    if arch.version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {}",
            arch.version
        )));
    }
    let mut layers = Vec::new();
    for (i, entry) in arch.layers.iter().enumerate() {
        let what = |part: &str| format!("layer {i} {part}");
        layers.push(match entry {
            LayerEntry::Conv2d { weight_shape, stride, padding, weights, bias } => {
                if weight_shape.len() != 4 {
                    return Err(Error::ModelFormat(format!(
                        "layer {i}: conv weight shape must be 4-d, got {weight_shape:?}"
                    )));
                }
                let w = read_blob(weights_bin, weights, weight_shape, &what("weights"))?;
                let b = read_blob(weights_bin, bias, &[weight_shape[0]], &what("bias"))?;
                LayerSpec::conv2d(w, b, *stride, *padding)?
            }
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::MaxPool { kernel, stride } => LayerSpec::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            LayerEntry::Flatten => LayerSpec::Flatten,
            LayerEntry::Affine { weight_shape, weights, bias } => {
                if weight_shape.len() != 2 {
                    return Err(Error::ModelFormat(format!(
                        "layer {i}: affine weight shape must be 2-d, got {weight_shape:?}"
                    )));
                }
                let w = read_blob(weights_bin, weights, weight_shape, &what("weights"))?;
                let b = read_blob(weights_bin, bias, &[weight_shape[0]], &what("bias"))?;
                LayerSpec::affine(w, b)?
            }
        });
    }
    let block_index = arch
        .block_index
        .into_iter()
        .map(|b| (b.label, b.layer))
        .collect();
    Model::new(layers, block_index, arch.class_count, &arch.input_shape)
        .map_err(|e| Error::ModelFormat(e.to_string()))
}
