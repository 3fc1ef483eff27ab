//! Model I/O: JSON manifests with raw little-endian parameter blobs.
//!
//! Two on-disk formats share one idiom — a small JSON manifest describing
//! layers, with each parameter tensor in its own binary file next to the
//! manifest (f32 little-endian for dense parameters, i8 for ternary codes):
//!
//! * Float models: `{"layers": [{"kind": "dense", "in": 2, "out": 1,
//!   "weights": "w0.bin", "bias": "b0.bin"}, ...]}` with an optional
//!   `"input": [c, h, w]` per-sample shape for convolutional models.
//! * Quantized models (`"format": "ternia-quantized/v1"`): weight layers
//!   carry `"op"`, `"order"`, and per-term `codes`/`scale` blob pairs.
//!   Models trained with activation quantization additionally carry an
//!   `"act"` block with the bit-width and frozen per-activation ranges.
//!
//! Blob paths are resolved relative to the manifest's directory. Loading
//! validates blob sizes, finiteness, and structural layer compatibility;
//! saving a loaded model reproduces every blob byte-for-byte.

use crate::error::{Error, Result};
use crate::quant::{self, ExpansionStack, Operator, TernaryTensor};
use crate::tensor::{self, Layer, ModelGraph, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Schema tag written into quantized containers.
pub const QUANTIZED_FORMAT: &str = "ternia-quantized/v1";

// ---------------------------------------------------------------------------
// Blob primitives
// ---------------------------------------------------------------------------

/// Read a little-endian `f32` blob.
pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: format!("blob length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write a little-endian `f32` blob.
pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read an `i8` blob.
pub fn read_i8_blob(path: &Path) -> Result<Vec<i8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.into_iter().map(|b| b as i8).collect())
}

/// Write an `i8` blob.
pub fn write_i8_blob(path: &Path, values: &[i8]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| v as u8).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Float model manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<Vec<usize>>,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        in_features: usize,
        out: usize,
        weights: String,
        bias: String,
    },
    Conv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        out: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weights: String,
        bias: String,
    },
    Batchnorm {
        channels: usize,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
    Relu,
    Avgpool {
        size: usize,
    },
    Flatten,
    Add {
        from: usize,
    },
}

fn default_stride() -> usize {
    1
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read_param(
    dir: &Path,
    name: &str,
    layer: &str,
    param: &str,
    expected: usize,
) -> Result<Vec<f32>> {
    let path = dir.join(name);
    let values = read_f32_blob(&path)?;
    if values.len() != expected {
        return Err(Error::BlobSize {
            path,
            layer: layer.to_string(),
            got: values.len(),
            expected,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("layer {layer}, parameter {param} ({name})"),
        });
    }
    Ok(values)
}

/// Load a float model manifest and its parameter blobs.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let dir = manifest_dir(path);
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.iter().enumerate() {
        let layer = match spec {
            LayerSpec::Dense {
                in_features,
                out,
                weights,
                bias,
            } => {
                let name = format!("{i}:dense");
                let w = read_param(&dir, weights, &name, "weights", in_features * out)?;
                let b = read_param(&dir, bias, &name, "bias", *out)?;
                Layer::Dense {
                    weights: Tensor::new(vec![*out, *in_features], w)?,
                    bias: b,
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out,
                kh,
                kw,
                stride,
                padding,
                weights,
                bias,
            } => {
                let name = format!("{i}:conv2d");
                if *stride == 0 {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        detail: format!("layer {name}: stride must be positive"),
                    });
                }
                let w = read_param(&dir, weights, &name, "weights", in_channels * out * kh * kw)?;
                let b = read_param(&dir, bias, &name, "bias", *out)?;
                Layer::Conv2d {
                    weights: Tensor::new(vec![*out, *in_channels, *kh, *kw], w)?,
                    bias: b,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::Batchnorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                let name = format!("{i}:batchnorm");
                Layer::BatchNorm {
                    gamma: read_param(&dir, gamma, &name, "gamma", *channels)?,
                    beta: read_param(&dir, beta, &name, "beta", *channels)?,
                    mean: read_param(&dir, mean, &name, "mean", *channels)?,
                    var: read_param(&dir, var, &name, "var", *channels)?,
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Avgpool { size } => Layer::AvgPool { size: *size },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Add { from } => Layer::Add { from: *from },
        };
        layers.push(layer);
    }
    let graph = ModelGraph::new(manifest.input, layers)?;
    check_static_compatibility(&graph, path)?;
    Ok(graph)
}

/// Structural checks that do not need an input shape: feature-width chains
/// across dense/batchnorm layers and channel chains across conv layers.
fn check_static_compatibility(graph: &ModelGraph, path: &Path) -> Result<()> {
    let mut width: Option<usize> = graph.input.as_ref().and_then(|s| s.first().copied());
    for (i, layer) in graph.layers.iter().enumerate() {
        let name = tensor::layer_name(i, layer);
        match layer {
            Layer::Dense { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if let Some(w) = width {
                    if w != inp {
                        return Err(Error::Manifest {
                            path: path.to_path_buf(),
                            detail: format!(
                                "layer {name} expects {inp} inputs but receives {w}"
                            ),
                        });
                    }
                }
                width = Some(out);
            }
            Layer::Conv2d { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if let Some(w) = width {
                    if w != inp {
                        return Err(Error::Manifest {
                            path: path.to_path_buf(),
                            detail: format!(
                                "layer {name} expects {inp} channels but receives {w}"
                            ),
                        });
                    }
                }
                width = Some(out);
            }
            Layer::BatchNorm { gamma, .. } => {
                if let Some(w) = width {
                    if w != gamma.len() {
                        return Err(Error::Manifest {
                            path: path.to_path_buf(),
                            detail: format!(
                                "layer {name} covers {} channels but receives {w}",
                                gamma.len()
                            ),
                        });
                    }
                }
            }
            Layer::Relu | Layer::AvgPool { .. } | Layer::Add { .. } => {}
            Layer::Flatten => width = None, // flattened width needs spatial dims
        }
    }
    Ok(())
}

/// Save a float model as `manifest_path` plus blobs named after its stem.
///
/// Blob contents are the raw bit patterns of the in-memory tensors, so a
/// load/save round trip is byte-identical.
pub fn save_model(graph: &ModelGraph, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_dir(manifest_path);
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let mut specs = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let blob = |param: &str| format!("{stem}_l{i}_{param}.bin");
        let spec = match layer {
            Layer::Dense { weights, bias } => {
                let w_name = blob("weights");
                let b_name = blob("bias");
                write_f32_blob(&dir.join(&w_name), weights.as_slice())?;
                write_f32_blob(&dir.join(&b_name), bias)?;
                LayerSpec::Dense {
                    in_features: weights.shape()[1],
                    out: weights.shape()[0],
                    weights: w_name,
                    bias: b_name,
                }
            }
            Layer::Conv2d {
                weights,
                bias,
                stride,
                padding,
            } => {
                let w_name = blob("weights");
                let b_name = blob("bias");
                write_f32_blob(&dir.join(&w_name), weights.as_slice())?;
                write_f32_blob(&dir.join(&b_name), bias)?;
                LayerSpec::Conv2d {
                    in_channels: weights.shape()[1],
                    out: weights.shape()[0],
                    kh: weights.shape()[2],
                    kw: weights.shape()[3],
                    stride: *stride,
                    padding: *padding,
                    weights: w_name,
                    bias: b_name,
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => {
                let names = ["gamma", "beta", "mean", "var"];
                let params = [gamma, beta, mean, var];
                for (n, p) in names.iter().zip(params.iter()) {
                    write_f32_blob(&dir.join(blob(n)), p)?;
                }
                LayerSpec::Batchnorm {
                    channels: gamma.len(),
                    gamma: blob("gamma"),
                    beta: blob("beta"),
                    mean: blob("mean"),
                    var: blob("var"),
                }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::AvgPool { size } => LayerSpec::Avgpool { size: *size },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Add { from } => LayerSpec::Add { from: *from },
        };
        specs.push(spec);
    }
    let manifest = Manifest {
        input: graph.input.clone(),
        layers: specs,
    };
    write_json(manifest_path, &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Quantized containers
// ---------------------------------------------------------------------------

/// One layer of a quantized model: weight layers carry ternary expansions,
/// everything else passes through unchanged from the float model.
#[derive(Debug, Clone)]
pub enum QuantizedLayer {
    /// Dense layer with quantized weights.
    Dense {
        stack: ExpansionStack,
        bias: Vec<f32>,
    },
    /// Convolution with quantized kernels.
    Conv2d {
        stack: ExpansionStack,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
    },
    /// Unquantized layer copied from the source model.
    Passthrough(Layer),
}

/// Activation quantization metadata frozen at training time: ranges apply to
/// ReLU outputs in graph order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActQuantSpec {
    /// Bit width of the activation grid.
    pub bits: u8,
    /// One symmetric range per ReLU, in graph order.
    pub ranges: Vec<f32>,
}

/// A quantized model: layer stack plus optional activation quantization.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// Per-sample input shape carried over from the float model.
    pub input: Option<Vec<usize>>,
    /// Layers in execution order.
    pub layers: Vec<QuantizedLayer>,
    /// Activation quantization, if the model was trained with it.
    pub act: Option<ActQuantSpec>,
}

impl QuantizedModel {
    /// Reconstruct a float model by summing each layer's expansion terms.
    pub fn dequantize(&self) -> Result<ModelGraph> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                QuantizedLayer::Dense { stack, bias } => Layer::Dense {
                    weights: stack.dequantize(),
                    bias: bias.clone(),
                },
                QuantizedLayer::Conv2d {
                    stack,
                    bias,
                    stride,
                    padding,
                } => Layer::Conv2d {
                    weights: stack.dequantize(),
                    bias: bias.clone(),
                    stride: *stride,
                    padding: *padding,
                },
                QuantizedLayer::Passthrough(layer) => layer.clone(),
            })
            .collect();
        ModelGraph::new(self.input.clone(), layers)
    }

    /// Forward pass with quantized weights and, when present, the frozen
    /// activation quantizers applied after each ReLU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let graph = self.dequantize()?;
        match &self.act {
            None => graph.forward(x),
            Some(act) => {
                let mut current = graph.adapt_input(x)?;
                let mut cache: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
                let mut relu_idx = 0usize;
                for (i, layer) in graph.layers.iter().enumerate() {
                    current = tensor::apply_layer(layer, &current, &cache, i)?;
                    if matches!(layer, Layer::Relu) {
                        let range = *act.ranges.get(relu_idx).ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "activation spec covers {} relus but the graph has more",
                                act.ranges.len()
                            ))
                        })?;
                        relu_idx += 1;
                        current = fake_quant_uniform(&current, act.bits, range)?;
                    }
                    cache.push(current.clone());
                }
                if relu_idx != act.ranges.len() {
                    return Err(Error::InvalidArgument(format!(
                        "activation spec covers {} relus but the graph has {relu_idx}",
                        act.ranges.len()
                    )));
                }
                Ok(current)
            }
        }
    }
}

/// Quantize-dequantize a tensor against one shared symmetric range.
pub fn fake_quant_uniform(x: &Tensor, bits: u8, range: f32) -> Result<Tensor> {
    let channels = x.shape().get(1).copied().unwrap_or(0);
    let lambda = vec![range; channels];
    let q = quant::quantize_activations(x, bits, &lambda, Operator::Naive)?;
    Ok(q.dequantize())
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizedManifest {
    format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    act: Option<ActQuantSpec>,
    layers: Vec<QLayerSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermSpec {
    codes: String,
    scale: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum QLayerSpec {
    Dense {
        #[serde(rename = "in")]
        in_features: usize,
        out: usize,
        op: Operator,
        order: usize,
        terms: Vec<TermSpec>,
        bias: String,
    },
    Conv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        out: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        op: Operator,
        order: usize,
        terms: Vec<TermSpec>,
        bias: String,
    },
    Batchnorm {
        channels: usize,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
    Relu,
    Avgpool {
        size: usize,
    },
    Flatten,
    Add {
        from: usize,
    },
}

/// True when the JSON file at `path` is a quantized container.
pub fn is_quantized_manifest(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(value
        .get("format")
        .and_then(|f| f.as_str())
        .map(|f| f.starts_with("ternia-quantized"))
        .unwrap_or(false))
}

fn read_terms(
    dir: &Path,
    terms: &[TermSpec],
    shape: &[usize],
    op: Operator,
    order: usize,
    layer: &str,
) -> Result<ExpansionStack> {
    if terms.len() != order || order == 0 {
        return Err(Error::Manifest {
            path: dir.to_path_buf(),
            detail: format!(
                "layer {layer}: declared order {order} but {} terms",
                terms.len()
            ),
        });
    }
    let elements: usize = shape.iter().product();
    let rows = shape[0];
    let mut stacks = Vec::with_capacity(terms.len());
    for t in terms {
        let codes_path = dir.join(&t.codes);
        let codes = read_i8_blob(&codes_path)?;
        if codes.len() != elements {
            return Err(Error::BlobSize {
                path: codes_path,
                layer: layer.to_string(),
                got: codes.len(),
                expected: elements,
            });
        }
        let scale_path = dir.join(&t.scale);
        let scale = read_f32_blob(&scale_path)?;
        if scale.len() != rows {
            return Err(Error::BlobSize {
                path: scale_path,
                layer: layer.to_string(),
                got: scale.len(),
                expected: rows,
            });
        }
        stacks.push(TernaryTensor::from_parts(
            shape.to_vec(),
            codes,
            scale,
            op,
        )?);
    }
    ExpansionStack::from_terms(op, stacks)
}

/// Load a quantized container.
pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: QuantizedManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if !manifest.format.starts_with("ternia-quantized") {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: format!("unknown format {:?}", manifest.format),
        });
    }
    let dir = manifest_dir(path);
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.into_iter().enumerate() {
        let layer = match spec {
            QLayerSpec::Dense {
                in_features,
                out,
                op,
                order,
                terms,
                bias,
            } => {
                let name = format!("{i}:dense");
                let stack = read_terms(&dir, &terms, &[out, in_features], op, order, &name)?;
                QuantizedLayer::Dense {
                    stack,
                    bias: read_param(&dir, &bias, &name, "bias", out)?,
                }
            }
            QLayerSpec::Conv2d {
                in_channels,
                out,
                kh,
                kw,
                stride,
                padding,
                op,
                order,
                terms,
                bias,
            } => {
                let name = format!("{i}:conv2d");
                let stack =
                    read_terms(&dir, &terms, &[out, in_channels, kh, kw], op, order, &name)?;
                QuantizedLayer::Conv2d {
                    stack,
                    bias: read_param(&dir, &bias, &name, "bias", out)?,
                    stride,
                    padding,
                }
            }
            QLayerSpec::Batchnorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                let name = format!("{i}:batchnorm");
                QuantizedLayer::Passthrough(Layer::BatchNorm {
                    gamma: read_param(&dir, &gamma, &name, "gamma", channels)?,
                    beta: read_param(&dir, &beta, &name, "beta", channels)?,
                    mean: read_param(&dir, &mean, &name, "mean", channels)?,
                    var: read_param(&dir, &var, &name, "var", channels)?,
                })
            }
            QLayerSpec::Relu => QuantizedLayer::Passthrough(Layer::Relu),
            QLayerSpec::Avgpool { size } => {
                QuantizedLayer::Passthrough(Layer::AvgPool { size })
            }
            QLayerSpec::Flatten => QuantizedLayer::Passthrough(Layer::Flatten),
            QLayerSpec::Add { from } => QuantizedLayer::Passthrough(Layer::Add { from }),
        };
        layers.push(layer);
    }
    Ok(QuantizedModel {
        input: manifest.input,
        layers,
        act: manifest.act,
    })
}

/// Save a quantized container as `manifest_path` plus blobs named after its
/// stem.
pub fn save_quantized(model: &QuantizedModel, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_dir(manifest_path);
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let mut specs = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let blob = |param: &str| format!("{stem}_l{i}_{param}.bin");
        let write_stack = |stack: &ExpansionStack| -> Result<Vec<TermSpec>> {
            let mut terms = Vec::with_capacity(stack.order());
            for (j, term) in stack.terms().iter().enumerate() {
                let codes_name = blob(&format!("t{j}_codes"));
                let scale_name = blob(&format!("t{j}_scale"));
                write_i8_blob(&dir.join(&codes_name), term.codes())?;
                write_f32_blob(&dir.join(&scale_name), term.scales())?;
                terms.push(TermSpec {
                    codes: codes_name,
                    scale: scale_name,
                });
            }
            Ok(terms)
        };
        let spec = match layer {
            QuantizedLayer::Dense { stack, bias } => {
                let b_name = blob("bias");
                write_f32_blob(&dir.join(&b_name), bias)?;
                QLayerSpec::Dense {
                    in_features: stack.shape()[1..].iter().product(),
                    out: stack.shape()[0],
                    op: stack.op(),
                    order: stack.order(),
                    terms: write_stack(stack)?,
                    bias: b_name,
                }
            }
            QuantizedLayer::Conv2d {
                stack,
                bias,
                stride,
                padding,
            } => {
                let b_name = blob("bias");
                write_f32_blob(&dir.join(&b_name), bias)?;
                QLayerSpec::Conv2d {
                    in_channels: stack.shape()[1],
                    out: stack.shape()[0],
                    kh: stack.shape()[2],
                    kw: stack.shape()[3],
                    stride: *stride,
                    padding: *padding,
                    op: stack.op(),
                    order: stack.order(),
                    terms: write_stack(stack)?,
                    bias: b_name,
                }
            }
            QuantizedLayer::Passthrough(inner) => match inner {
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let names = ["gamma", "beta", "mean", "var"];
                    let params = [gamma, beta, mean, var];
                    for (n, p) in names.iter().zip(params.iter()) {
                        write_f32_blob(&dir.join(blob(n)), p)?;
                    }
                    QLayerSpec::Batchnorm {
                        channels: gamma.len(),
                        gamma: blob("gamma"),
                        beta: blob("beta"),
                        mean: blob("mean"),
                        var: blob("var"),
                    }
                }
                Layer::Relu => QLayerSpec::Relu,
                Layer::AvgPool { size } => QLayerSpec::Avgpool { size: *size },
                Layer::Flatten => QLayerSpec::Flatten,
                Layer::Add { from } => QLayerSpec::Add { from: *from },
                Layer::Dense { .. } | Layer::Conv2d { .. } => {
                    return Err(Error::InvalidArgument(
                        "weight layers must be quantized before saving a container".into(),
                    ))
                }
            },
        };
        specs.push(spec);
    }
    let manifest = QuantizedManifest {
        format: QUANTIZED_FORMAT.to_string(),
        input: model.input.clone(),
        act: model.act.clone(),
        layers: specs,
    };
    write_json(manifest_path, &manifest)
}

/// Quantize every weight layer of a float model into an `order`-term
/// expansion, leaving other layers untouched.
pub fn quantize_model(
    graph: &ModelGraph,
    op: Operator,
    order: usize,
) -> Result<QuantizedModel> {
    if order == 0 {
        return Err(Error::InvalidArgument(
            "expansion order must be at least 1".into(),
        ));
    }
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let q = match layer {
            Layer::Dense { weights, bias } => {
                let (stack, _) = quant::expand(weights, op, order)?;
                QuantizedLayer::Dense {
                    stack,
                    bias: bias.clone(),
                }
            }
            Layer::Conv2d {
                weights,
                bias,
                stride,
                padding,
            } => {
                let (stack, _) = quant::expand(weights, op, order)?;
                QuantizedLayer::Conv2d {
                    stack,
                    bias: bias.clone(),
                    stride: *stride,
                    padding: *padding,
                }
            }
            other => QuantizedLayer::Passthrough(other.clone()),
        };
        layers.push(q);
    }
    Ok(QuantizedModel {
        input: graph.input.clone(),
        layers,
        act: None,
    })
}

/// Either kind of model manifest.
pub enum AnyModel {
    /// A float model.
    Float(ModelGraph),
    /// A quantized container.
    Quantized(QuantizedModel),
}

/// Load a manifest of either kind, detecting the container format tag.
pub fn load_any(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    if is_quantized_manifest(path)? {
        Ok(AnyModel::Quantized(load_quantized(path)?))
    } else {
        Ok(AnyModel::Float(load_model(path)?))
    }
}
