//! Dense row-major tensors and the desk-scale layer graph.
//!
//! A [`Tensor`] is a flat `Vec<f32>` plus a shape. The "row" of a tensor is
//! its leading axis: for a dense weight matrix `[out, in]` a row is an output
//! neuron, for a convolution kernel `[out, in, kh, kw]` a row is an output
//! channel with the trailing axes flattened. Per-row reductions and per-row
//! quantization scales follow this convention throughout the crate.
//!
//! [`ModelGraph`] is a feed-forward sequence of layers with optional skip
//! connections (`Add` references the output of an earlier layer). Forward
//! execution is deterministic: parallelism only ever splits work across
//! independent output rows, so results are bit-identical across runs and
//! thread counts.

use crate::error::{Error, Result};
use crate::linalg;

/// Epsilon added to the running variance in batch normalization.
pub const BATCHNORM_EPS: f32 = 1e-5;

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Shape of the tensor.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows (size of the leading axis; 0 for rank-0 tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per row (product of the trailing axes).
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Borrow one row as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Mutable access to one row.
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Flat read-only view of the data.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Flat mutable view of the data.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consume the tensor, returning its flat data.
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-row `(min, max)` pairs.
    ///
    /// Returns an error for tensors with empty rows: an extremum of nothing
    /// is undefined and would otherwise silently produce a zero scale.
    pub fn row_minmax(&self) -> Result<Vec<(f32, f32)>> {
        if self.row_len() == 0 {
            return Err(Error::Empty {
                what: "tensor row".to_string(),
            });
        }
        Ok((0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut lo = row[0];
                let mut hi = row[0];
                for &v in &row[1..] {
                    if v < lo {
                        lo = v;
                    }
                    if v > hi {
                        hi = v;
                    }
                }
                (lo, hi)
            })
            .collect())
    }
}

/// One layer of a feed-forward graph.
#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected layer: `y = x W^T + b` with `W` shaped `[out, in]`.
    Dense { weights: Tensor, bias: Vec<f32> },
    /// 2-D convolution with kernel `[out, in, kh, kw]`.
    Conv2d {
        weights: Tensor,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
    },
    /// Per-channel affine normalization with frozen statistics.
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    /// Elementwise `max(0, x)`.
    Relu,
    /// Non-overlapping average pooling with a square window.
    AvgPool { size: usize },
    /// Collapse all trailing axes into one feature axis.
    Flatten,
    /// Elementwise addition with the output of an earlier layer.
    Add { from: usize },
}

impl Layer {
    /// Short kind tag used in manifests and error messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Add { .. } => "add",
        }
    }

    /// The weight tensor of a dense or convolution layer, if any.
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

/// Feed-forward model: an ordered list of layers plus an optional declared
/// per-sample input shape (needed to reshape flat CSV features for
/// convolutional models).
#[derive(Debug, Clone)]
pub struct ModelGraph {
    /// Per-sample input shape, e.g. `[c, h, w]` for image-like models.
    pub input: Option<Vec<usize>>,
    /// Layers in execution order.
    pub layers: Vec<Layer>,
}

impl ModelGraph {
    /// Build a graph and validate cross-layer structure that does not depend
    /// on the input shape: `Add` references must point at an earlier layer.
    pub fn new(input: Option<Vec<usize>>, layers: Vec<Layer>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Add { from } = layer {
                if *from >= i {
                    return Err(Error::ShapeMismatch {
                        layer: layer_name(i, layer),
                        detail: format!("skip connection must reference an earlier layer, got {from}"),
                    });
                }
            }
        }
        Ok(ModelGraph { input, layers })
    }

    /// Run the graph on a batch.
    ///
    /// Rank-2 input `[n, d]` is reshaped to `[n, ..input]` when the graph
    /// declares a multi-axis input shape with matching element count, so flat
    /// CSV features feed convolutional models without a separate step.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut current = self.adapt_input(x)?;
        // Outputs are cached so Add layers can reference them; desk-scale
        // models make the extra clones irrelevant.
        let mut cache: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            current = apply_layer(layer, &current, &cache, i)?;
            cache.push(current.clone());
        }
        Ok(current)
    }

    /// Reshape flat features to the declared input shape when applicable.
    pub(crate) fn adapt_input(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(input) = &self.input {
            if x.shape().len() == 2 && input.len() > 1 {
                let per_sample: usize = input.iter().product();
                if per_sample == x.shape()[1] {
                    let mut shape = vec![x.shape()[0]];
                    shape.extend_from_slice(input);
                    return x.reshape(shape);
                }
            }
        }
        Ok(x.clone())
    }

    /// Indices of layers that carry quantizable weights (dense and conv).
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Human-readable layer identifier used in error messages: `"{index}:{kind}"`.
pub fn layer_name(index: usize, layer: &Layer) -> String {
    format!("{index}:{}", layer.kind())
}

pub(crate) fn apply_layer(layer: &Layer, x: &Tensor, cache: &[Tensor], index: usize) -> Result<Tensor> {
    let name = || layer_name(index, layer);
    match layer {
        Layer::Dense { weights, bias } => dense_forward(weights, bias, x, &name()),
        Layer::Conv2d {
            weights,
            bias,
            stride,
            padding,
        } => conv2d_forward(weights, bias, *stride, *padding, x, &name()),
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
        } => batchnorm_forward(gamma, beta, mean, var, x, &name()),
        Layer::Relu => {
            let mut out = x.clone();
            for v in out.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        Layer::AvgPool { size } => avgpool_forward(*size, x, &name()),
        Layer::Flatten => {
            if x.shape().len() < 2 {
                return Err(Error::ShapeMismatch {
                    layer: name(),
                    detail: format!("expected rank >= 2 input, got shape {:?}", x.shape()),
                });
            }
            x.reshape(vec![x.shape()[0], x.row_len()])
        }
        Layer::Add { from } => {
            let other = &cache[*from];
            if other.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    layer: name(),
                    detail: format!(
                        "skip input shape {:?} does not match current shape {:?}",
                        other.shape(),
                        x.shape()
                    ),
                });
            }
            let mut out = x.clone();
            for (o, s) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
                *o += s;
            }
            Ok(out)
        }
    }
}

/// `y = x W^T + b` for `x: [n, in]`, `W: [out, in]`.
pub fn dense_forward(weights: &Tensor, bias: &[f32], x: &Tensor, layer: &str) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("expected [n, in] input, got shape {:?}", x.shape()),
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (out, d_w) = (weights.shape()[0], weights.shape()[1]);
    if d != d_w {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("input has {d} features but weights expect {d_w}"),
        });
    }
    if bias.len() != out {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("bias length {} does not match {out} outputs", bias.len()),
        });
    }
    let mut y = linalg::matmul_nt(x.as_slice(), weights.as_slice(), n, d, out);
    for row in y.chunks_exact_mut(out) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Tensor::new(vec![n, out], y)
}

/// im2col patch matrix for a convolution: rows are output positions
/// (`n * h_out * w_out`), columns are kernel taps (`c * kh * kw`).
pub(crate) fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    layer: &str,
) -> Result<(Tensor, usize, usize)> {
    if x.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("expected [n, c, h, w] input, got shape {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
        });
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    let cols = c * kh * kw;
    let mut patches = vec![0.0f32; n * h_out * w_out * cols];
    let xs = x.as_slice();
    for b in 0..n {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row_base = ((b * h_out + oy) * w_out + ox) * cols;
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            let dst = row_base + (ch * kh + ky) * kw + kx;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                let src = ((b * c + ch) * h + iy as usize) * w + ix as usize;
                                patches[dst] = xs[src];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n * h_out * w_out, cols], patches)?,
        h_out,
        w_out,
    ))
}

fn conv2d_forward(
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
    x: &Tensor,
    layer: &str,
) -> Result<Tensor> {
    let ws = weights.shape();
    let (out, c_k, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if x.shape().len() != 4 || x.shape()[1] != c_k {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!(
                "expected [n, {c_k}, h, w] input, got shape {:?}",
                x.shape()
            ),
        });
    }
    let n = x.shape()[0];
    let (patches, h_out, w_out) = im2col(x, kh, kw, stride, padding, layer)?;
    // patches: [n*h_out*w_out, c*kh*kw]; kernel rows are already flat taps.
    let rows = patches.shape()[0];
    let cols = patches.shape()[1];
    let flat = linalg::matmul_nt(patches.as_slice(), weights.as_slice(), rows, cols, out);
    // Reorder [n, h_out, w_out, out] -> [n, out, h_out, w_out] and add bias.
    let mut y = vec![0.0f32; n * out * h_out * w_out];
    for b in 0..n {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let src_base = ((b * h_out + oy) * w_out + ox) * out;
                for o in 0..out {
                    y[((b * out + o) * h_out + oy) * w_out + ox] = flat[src_base + o] + bias[o];
                }
            }
        }
    }
    Tensor::new(vec![n, out, h_out, w_out], y)
}

fn batchnorm_forward(
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    x: &Tensor,
    layer: &str,
) -> Result<Tensor> {
    let channels = gamma.len();
    let c_axis = match x.shape().len() {
        2 | 4 => x.shape()[1],
        _ => {
            return Err(Error::ShapeMismatch {
                layer: layer.to_string(),
                detail: format!("expected rank-2 or rank-4 input, got shape {:?}", x.shape()),
            })
        }
    };
    if c_axis != channels {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("input has {c_axis} channels but parameters cover {channels}"),
        });
    }
    let spatial: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let mut out = x.clone();
    let data = out.as_mut_slice();
    for (i, v) in data.iter_mut().enumerate() {
        let ch = (i / spatial) % channels;
        let inv = 1.0 / (var[ch] + BATCHNORM_EPS).sqrt();
        *v = gamma[ch] * (*v - mean[ch]) * inv + beta[ch];
    }
    Ok(out)
}

fn avgpool_forward(size: usize, x: &Tensor, layer: &str) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::InvalidArgument("avgpool size must be positive".into()));
    }
    if x.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("expected [n, c, h, w] input, got shape {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % size != 0 || w % size != 0 {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("spatial dims {h}x{w} not divisible by window {size}"),
        });
    }
    let (ho, wo) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f32;
    let xs = x.as_slice();
    let mut y = vec![0.0f32; n * c * ho * wo];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ky in 0..size {
                        for kx in 0..size {
                            acc += xs[((b * c + ch) * h + oy * size + ky) * w + ox * size + kx];
                        }
                    }
                    y[((b * c + ch) * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], y)
}

/// Fraction of rows whose arg-max logit equals the label.
///
/// Ties resolve to the lowest class index, so an all-constant logit row
/// predicts class 0.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    if logits.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "accuracy expects [n, classes] logits, got shape {:?}",
            logits.shape()
        )));
    }
    let n = logits.shape()[0];
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty {
            what: "evaluation batch".to_string(),
        });
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if argmax(logits.row(i)) == label {
            hits += 1;
        }
    }
    Ok(hits as f32 / n as f32)
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layer(weights: Vec<f32>, out: usize, input: usize, bias: Vec<f32>) -> Layer {
        Layer::Dense {
            weights: Tensor::new(vec![out, input], weights).unwrap(),
            bias,
        }
    }

    #[test]
    fn row_minmax_matches_hand_computation() {
        let t = Tensor::new(vec![2, 3], vec![-1.0, 0.5, 0.25, 2.0, -3.0, 1.0]).unwrap();
        assert_eq!(t.row_minmax().unwrap(), vec![(-1.0, 0.5), (-3.0, 2.0)]);
    }

    #[test]
    fn row_minmax_rejects_empty_rows() {
        let t = Tensor::new(vec![2, 0], vec![]).unwrap();
        assert!(t.row_minmax().is_err());
    }

    #[test]
    fn dense_forward_known_values() {
        let g = ModelGraph::new(
            None,
            vec![dense_layer(vec![0.5, -0.5], 1, 2, vec![0.0])],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, -2.0]).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_layer() {
        let g = ModelGraph::new(None, vec![dense_layer(vec![1.0, 0.0], 1, 2, vec![0.0])]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = g.forward(&x).unwrap_err().to_string();
        assert!(err.contains("0:dense"), "unhelpful error: {err}");
    }

    #[test]
    fn forward_is_linear_for_linear_graphs() {
        let g = ModelGraph::new(
            None,
            vec![
                dense_layer(vec![0.3, -1.2, 0.7, 0.05, 0.4, -0.9], 2, 3, vec![0.0, 0.0]),
                dense_layer(vec![1.5, -0.25, 0.8, 0.33], 2, 2, vec![0.0, 0.0]),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.2, -1.4, 2.2]).unwrap();
        let y1 = g.forward(&x).unwrap();
        let x3 = Tensor::new(vec![1, 3], vec![3.0 * 0.2, 3.0 * -1.4, 3.0 * 2.2]).unwrap();
        let y3 = g.forward(&x3).unwrap();
        for (a, b) in y1.as_slice().iter().zip(y3.as_slice()) {
            let rel = (3.0 * a - b).abs() / b.abs().max(1e-12);
            assert!(rel < 1e-5, "forward(3x) != 3 forward(x): {a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_with_identity_parameters_is_identity() {
        let g = ModelGraph::new(
            None,
            vec![Layer::BatchNorm {
                gamma: vec![1.0, 1.0],
                beta: vec![0.0, 0.0],
                mean: vec![0.0, 0.0],
                var: vec![1.0, 1.0],
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.5, -2.0, 3.25, 0.125]).unwrap();
        let y = g.forward(&x).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-4, "batchnorm(1,0,0,1) moved {a} to {b}");
        }
    }

    #[test]
    fn batchnorm_normalizes_to_declared_statistics() {
        let g = ModelGraph::new(
            None,
            vec![Layer::BatchNorm {
                gamma: vec![2.0],
                beta: vec![1.0],
                mean: vec![3.0],
                var: vec![4.0],
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        let y = g.forward(&x).unwrap();
        // 2 * (5 - 3) / sqrt(4 + eps) + 1 = 3 (up to eps)
        assert!((y.as_slice()[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let g = ModelGraph::new(None, vec![Layer::Relu]).unwrap();
        let x = Tensor::new(vec![1, 4], vec![-1.0, 0.0, 2.5, -0.001]).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.5, 0.0]);
    }

    #[test]
    fn avgpool_averages_each_window() {
        let g = ModelGraph::new(None, vec![Layer::AvgPool { size: 2 }]).unwrap();
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.as_slice(), &[3.5, 5.5]);
    }

    #[test]
    fn flatten_collapses_trailing_axes() {
        let g = ModelGraph::new(None, vec![Layer::Flatten]).unwrap();
        let x = Tensor::zeros(vec![3, 2, 4, 4]);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 32]);
    }

    #[test]
    fn add_applies_skip_connection() {
        let g = ModelGraph::new(
            None,
            vec![
                dense_layer(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]),
                Layer::Relu,
                Layer::Add { from: 0 },
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![-2.0, 3.0]).unwrap();
        let y = g.forward(&x).unwrap();
        // identity dense -> [-2, 3]; relu -> [0, 3]; add layer-0 output -> [-2, 6]
        assert_eq!(y.as_slice(), &[-2.0, 6.0]);
    }

    #[test]
    fn add_referencing_later_layer_is_rejected() {
        let err = ModelGraph::new(None, vec![Layer::Add { from: 0 }]);
        assert!(err.is_err());
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        let mut kernel = Tensor::zeros(vec![2, 2, 1, 1]);
        kernel.as_mut_slice()[0] = 1.0; // out 0 <- in 0
        kernel.as_mut_slice()[3] = 1.0; // out 1 <- in 1
        let g = ModelGraph::new(
            None,
            vec![Layer::Conv2d {
                weights: kernel,
                bias: vec![0.0, 0.0],
                stride: 1,
                padding: 0,
            }],
        )
        .unwrap();
        let x = Tensor::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn conv2d_matches_hand_convolution() {
        // 1 input channel, 1 output channel, 2x2 kernel of ones, no padding.
        let g = ModelGraph::new(
            None,
            vec![Layer::Conv2d {
                weights: Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
                bias: vec![0.5],
                stride: 1,
                padding: 0,
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.as_slice(), &[12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv2d_padding_extends_with_zeros() {
        let g = ModelGraph::new(
            None,
            vec![Layer::Conv2d {
                weights: Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
                bias: vec![0.0],
                stride: 1,
                padding: 1,
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // Every output sums the whole input minus the corner that slid off.
        assert_eq!(y.as_slice(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn declared_input_shape_reshapes_flat_features() {
        let g = ModelGraph::new(
            Some(vec![1, 2, 2]),
            vec![Layer::Flatten],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
    }

    #[test]
    fn accuracy_breaks_ties_toward_lowest_index() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[2, 2]).unwrap(), 0.0);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let g = ModelGraph::new(
            None,
            vec![
                dense_layer(
                    (0..64 * 32).map(|i| ((i * 37 % 101) as f32 - 50.0) / 17.0).collect(),
                    64,
                    32,
                    vec![0.01; 64],
                ),
                Layer::Relu,
                dense_layer(
                    (0..64 * 4).map(|i| ((i * 53 % 89) as f32 - 44.0) / 23.0).collect(),
                    4,
                    64,
                    vec![0.0; 4],
                ),
            ],
        )
        .unwrap();
        let x = Tensor::new(
            vec![8, 32],
            (0..8 * 32).map(|i| ((i * 29 % 97) as f32 - 48.0) / 31.0).collect(),
        )
        .unwrap();
        let y1 = g.forward(&x).unwrap();
        let y2 = g.forward(&x).unwrap();
        assert_eq!(y1.as_slice(), y2.as_slice(), "forward must be bit-identical");
    }
}
