//! Quantization-aware training for small dense networks.
//!
//! The trainer keeps full-precision master weights and, on every step, passes
//! them through the active weight quantizer before the forward pass, so the
//! loss is always measured on the ternary weights the deployed model will
//! actually use. Scales are re-derived from the master weights each step;
//! nothing about the quantizer is learned or cached. Gradients flow through
//! the quantizer with a straight-through estimator: the backward pass treats
//! the quantizer as the identity inside the clip range `[-lambda, lambda]`.
//! Because `lambda` is the row extremum of the very weights being quantized,
//! every weight sits inside the clip range and the estimator is exactly the
//! identity on weights.
//!
//! Hidden activations are rectified and then fake-quantized on a symmetric
//! uniform grid (4 bits by default). Each ReLU tracks a scalar running-max
//! range during training; the range is updated from the batch *before* the
//! batch is quantized, so training activations never saturate the grid, and
//! the final ranges are frozen into the exported model.
//!
//! Training is plain mini-batch SGD with momentum. All randomness (weight
//! init, batch order) comes from one counter-based generator per seed, and
//! every reduction runs in a fixed order, so a given seed reproduces the same
//! trained network bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{fake_quant_uniform, ActQuantSpec, QuantizedLayer, QuantizedModel};
use crate::quant::{self, ExpansionStack, Operator};
use crate::tensor::{self, Layer, ModelGraph, Tensor};
use crate::linalg;

/// Weight transform applied before each forward pass.
///
/// `Identity` disables weight quantization entirely and must leave training
/// byte-for-byte identical to a full-precision run; it exists so the
/// quantized trainer can be checked against its own unquantized baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantHook {
    /// Pass master weights through unchanged.
    Identity,
    /// Quantize each weight matrix with the given ternary operator.
    Op(Operator),
}

impl QuantHook {
    /// Apply the hook to one weight matrix.
    pub fn apply(&self, weights: &Tensor) -> Result<Tensor> {
        match self {
            QuantHook::Identity => Ok(weights.clone()),
            QuantHook::Op(op) => Ok(quant::quantize(weights, *op)?.dequantize()),
        }
    }
}

/// Configuration for a quantization-aware training run.
#[derive(Debug, Clone)]
pub struct QatConfig {
    /// Architecture spec, e.g. `"mlp:16,16"` for two hidden layers of 16
    /// units. `"mlp"` alone is a linear classifier.
    pub arch: String,
    /// Number of passes over the training set.
    pub epochs: usize,
    /// SGD step size.
    pub learning_rate: f32,
    /// Momentum coefficient for the velocity buffers.
    pub momentum: f32,
    /// Mini-batch size; the last batch of an epoch may be smaller.
    pub batch_size: usize,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Weight bit-width; only 2 (ternary) is supported.
    pub weight_bits: u8,
    /// Activation bit-width for hidden ReLU outputs; 32 disables activation
    /// quantization.
    pub act_bits: u8,
    /// Weight quantizer applied on every forward pass.
    pub hook: QuantHook,
    /// Seeds to train; each seed is an independent run.
    pub seeds: Vec<u64>,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            arch: "mlp:16,16".to_string(),
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            grad_clip: 5.0,
            weight_bits: 2,
            act_bits: 4,
            hook: QuantHook::Op(Operator::TQuant),
            seeds: vec![0],
        }
    }
}

impl QatConfig {
    /// Check the configuration for internal consistency.
    pub fn validate(&self) -> Result<()> {
        parse_arch(&self.arch)?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gradient clip must be non-negative and finite, got {}",
                self.grad_clip
            )));
        }
        if self.weight_bits != 2 {
            return Err(Error::InvalidArgument(format!(
                "only 2-bit (ternary) weights are supported, got {} bits",
                self.weight_bits
            )));
        }
        if !matches!(self.act_bits, 2 | 4 | 8 | 32) {
            return Err(Error::InvalidArgument(format!(
                "activation bits must be 2, 4, 8, or 32, got {}",
                self.act_bits
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("need at least one seed".into()));
        }
        Ok(())
    }
}

/// Parse an architecture spec into hidden-layer widths.
///
/// Accepts `"mlp"` (no hidden layers) or `"mlp:h1,h2,..."` with positive
/// integer widths.
pub fn parse_arch(spec: &str) -> Result<Vec<usize>> {
    let rest = spec
        .strip_prefix("mlp")
        .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{spec}'")))?;
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    let body = rest.strip_prefix(':').ok_or_else(|| {
        Error::InvalidArgument(format!("unknown architecture '{spec}'"))
    })?;
    let mut hidden = Vec::new();
    for part in body.split(',') {
        let width: usize = part.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("bad hidden width '{part}' in '{spec}'"))
        })?;
        if width == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden widths must be positive in '{spec}'"
            )));
        }
        hidden.push(width);
    }
    Ok(hidden)
}

/// One dense layer of the trainer's network: master weights and bias.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Weight matrix, shape `[out, in]`.
    pub weights: Tensor,
    /// Per-output bias.
    pub bias: Vec<f32>,
}

/// A multi-layer perceptron: dense layers with ReLU between them (none after
/// the final layer).
#[derive(Debug, Clone)]
pub struct Mlp {
    /// Dense layers in execution order.
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Build a network from explicit layer dimensions `[in, h1, ..., out]`
    /// with He-scaled Gaussian weights and zero biases.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output dimensions".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let sigma = (2.0 / fan_in as f64).sqrt();
            let mut data = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out * fan_in {
                let z: f64 = StandardNormal.sample(rng);
                data.push((z * sigma) as f32);
            }
            layers.push(DenseLayer {
                weights: Tensor::new(vec![fan_out, fan_in], data)?,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(Mlp { layers })
    }

    /// Build a network from an architecture spec, input dimension, and class
    /// count, seeding the weight draw.
    pub fn from_spec(arch: &str, input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        let hidden = parse_arch(arch)?;
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend(hidden);
        dims.push(classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::init(&dims, &mut rng)
    }

    /// Number of ReLU activations (one between each pair of dense layers).
    pub fn num_relus(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Total number of trainable parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Convert to a float model graph (dense/ReLU stack, master weights).
    pub fn to_graph(&self) -> Result<ModelGraph> {
        let mut layers = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(Layer::Dense {
                weights: layer.weights.clone(),
                bias: layer.bias.clone(),
            });
            if i + 1 < self.layers.len() {
                layers.push(Layer::Relu);
            }
        }
        ModelGraph::new(None, layers)
    }
}

/// Intermediate values of one quantized forward pass, kept for backprop.
struct ForwardCache {
    /// Input to each dense layer; `inputs[0]` is the batch itself.
    inputs: Vec<Tensor>,
    /// Pre-ReLU outputs of each non-final layer.
    pre_relu: Vec<Tensor>,
    /// Hook-quantized weights actually used in the forward pass.
    quantized: Vec<Tensor>,
    /// Final-layer outputs.
    logits: Tensor,
}

/// Run the quantized forward pass. With `track` set, each ReLU's running-max
/// range is raised to cover the current batch before the batch is quantized.
fn forward_batch(
    mlp: &Mlp,
    hook: &QuantHook,
    act_bits: u8,
    ranges: &mut [f32],
    track: bool,
    x: &Tensor,
) -> Result<ForwardCache> {
    if ranges.len() != mlp.num_relus() {
        return Err(Error::InvalidArgument(format!(
            "expected {} activation ranges, got {}",
            mlp.num_relus(),
            ranges.len()
        )));
    }
    let n = x.rows();
    let mut inputs = Vec::with_capacity(mlp.layers.len());
    let mut pre_relu = Vec::with_capacity(mlp.num_relus());
    let mut quantized = Vec::with_capacity(mlp.layers.len());
    let mut current = x.clone();
    for (i, layer) in mlp.layers.iter().enumerate() {
        let wq = hook.apply(&layer.weights)?;
        let (out, inp) = (layer.weights.shape()[0], layer.weights.shape()[1]);
        if current.row_len() != inp {
            return Err(Error::ShapeMismatch {
                layer: format!("{i}:dense"),
                detail: format!("input width {} does not match weights [{out}, {inp}]", current.row_len()),
            });
        }
        let mut z = linalg::matmul_nt(current.as_slice(), wq.as_slice(), n, inp, out);
        for row in z.chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let z = Tensor::new(vec![n, out], z)?;
        inputs.push(current);
        quantized.push(wq);
        if i + 1 < mlp.layers.len() {
            let mut r = z.clone();
            for v in r.as_mut_slice() {
                *v = v.max(0.0);
            }
            if track {
                let batch_max = r.as_slice().iter().cloned().fold(0.0f32, f32::max);
                if batch_max > ranges[i] {
                    ranges[i] = batch_max;
                }
            }
            current = if act_bits == 32 {
                r.clone()
            } else {
                fake_quant_uniform(&r, act_bits, ranges[i])?
            };
            pre_relu.push(z);
        } else {
            return Ok(ForwardCache {
                inputs,
                pre_relu,
                quantized,
                logits: z,
            });
        }
    }
    unreachable!("loop returns on the final layer")
}

/// Mean softmax cross-entropy over a batch and its gradient w.r.t. logits.
fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    let c = logits.row_len();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Empty {
            what: "batch".into(),
        });
    }
    let mut grad = vec![0.0f32; n * c];
    let mut loss = 0.0f64;
    for (i, (row, &label)) in logits.as_slice().chunks(c).zip(labels).enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        let g = &mut grad[i * c..(i + 1) * c];
        for (gv, &v) in g.iter_mut().zip(row) {
            let e = (v - m).exp();
            *gv = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        loss -= f64::from(g[label] * inv).ln();
        let scale = inv / n as f32;
        for (j, gv) in g.iter_mut().enumerate() {
            *gv *= scale;
            if j == label {
                *gv -= 1.0 / n as f32;
            }
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Result of one straight-through forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Final-layer outputs for the batch.
    pub logits: Tensor,
    /// Gradient w.r.t. each layer's master weights, shapes matching the
    /// weight matrices.
    pub weight_grads: Vec<Tensor>,
    /// Gradient w.r.t. each layer's bias.
    pub bias_grads: Vec<Vec<f32>>,
}

/// One quantized forward and straight-through backward pass on a batch.
///
/// The forward pass uses hook-quantized weights and (optionally) quantized
/// hidden activations; the backward pass propagates deltas through those same
/// quantized values and hands the resulting gradient to the master weights
/// unchanged. With `track` set, ReLU ranges are updated from the batch first.
pub fn ste_step(
    mlp: &Mlp,
    hook: &QuantHook,
    act_bits: u8,
    ranges: &mut [f32],
    track: bool,
    x: &Tensor,
    labels: &[usize],
) -> Result<StepOutput> {
    let cache = forward_batch(mlp, hook, act_bits, ranges, track, x)?;
    let n = x.rows();
    let (loss, grad_logits) = softmax_ce(&cache.logits, labels)?;
    let num_layers = mlp.layers.len();
    let mut weight_grads = vec![Tensor::zeros(vec![1]); num_layers];
    let mut bias_grads = vec![Vec::new(); num_layers];
    let mut g = grad_logits;
    for i in (0..num_layers).rev() {
        let out = mlp.layers[i].weights.shape()[0];
        let inp = mlp.layers[i].weights.shape()[1];
        let gw = linalg::matmul_tn(g.as_slice(), cache.inputs[i].as_slice(), n, out, inp);
        weight_grads[i] = Tensor::new(vec![out, inp], gw)?;
        let mut gb = vec![0.0f32; out];
        for row in g.as_slice().chunks(out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        bias_grads[i] = gb;
        if i > 0 {
            let mut gx = linalg::matmul_nn(g.as_slice(), cache.quantized[i].as_slice(), n, out, inp);
            for (gv, &z) in gx.iter_mut().zip(cache.pre_relu[i - 1].as_slice()) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
            g = Tensor::new(vec![n, inp], gx)?;
        }
    }
    Ok(StepOutput {
        loss,
        logits: cache.logits,
        weight_grads,
        bias_grads,
    })
}

/// Classification accuracy of the quantized forward pass on a dataset, using
/// frozen activation ranges.
pub fn evaluate_quantized(
    mlp: &Mlp,
    hook: &QuantHook,
    act_bits: u8,
    ranges: &[f32],
    data: &Dataset,
) -> Result<f64> {
    let mut frozen = ranges.to_vec();
    let cache = forward_batch(mlp, hook, act_bits, &mut frozen, false, &data.features)?;
    Ok(f64::from(tensor::accuracy(&cache.logits, &data.labels)?))
}

/// One trained network: the master weights, the frozen activation ranges, and
/// the quantized test accuracy.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    /// Seed that produced this network.
    pub seed: u64,
    /// Master weights after training.
    pub mlp: Mlp,
    /// Final running-max range per ReLU.
    pub act_ranges: Vec<f32>,
    /// Quantized accuracy on the held-out set.
    pub accuracy: f64,
}

/// Train one seed with the straight-through estimator.
///
/// Weight init and batch order are drawn from a generator seeded with `seed`,
/// so the run is reproducible bit for bit. Returns an error if the loss stops
/// being finite.
pub fn ste_train_single(
    train: &Dataset,
    test: &Dataset,
    cfg: &QatConfig,
    seed: u64,
) -> Result<TrainedRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty {
            what: "training set".into(),
        });
    }
    if test.is_empty() {
        return Err(Error::Empty {
            what: "test set".into(),
        });
    }
    if train.dim() != test.dim() {
        return Err(Error::InvalidArgument(format!(
            "train dimension {} does not match test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let classes = train.num_classes.max(test.num_classes).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = parse_arch(&cfg.arch)?;
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(train.dim());
    dims.extend(hidden);
    dims.push(classes);
    let mut mlp = Mlp::init(&dims, &mut rng)?;
    let mut ranges = vec![0.0f32; mlp.num_relus()];
    let mut vel_w: Vec<Vec<f32>> = mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut vel_b: Vec<Vec<f32>> = mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // Cosine decay: late steps take small, settling updates, which
            // keeps the quantized forward pass from wandering once the
            // running-max activation ranges have stabilized.
            let progress = step as f32 / total_steps as f32;
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            let batch = train.select(chunk)?;
            let out = ste_step(
                &mlp,
                &cfg.hook,
                cfg.act_bits,
                &mut ranges,
                true,
                &batch.features,
                &batch.labels,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    layer: format!("seed {seed}"),
                    iteration: step,
                });
            }
            let clip = if cfg.grad_clip > 0.0 {
                let mut sq = 0.0f64;
                for i in 0..mlp.layers.len() {
                    for &g in out.weight_grads[i].as_slice() {
                        sq += f64::from(g) * f64::from(g);
                    }
                    for &g in &out.bias_grads[i] {
                        sq += f64::from(g) * f64::from(g);
                    }
                }
                let norm = sq.sqrt();
                if norm > f64::from(cfg.grad_clip) {
                    (f64::from(cfg.grad_clip) / norm) as f32
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for i in 0..mlp.layers.len() {
                let gw = out.weight_grads[i].as_slice();
                let w = mlp.layers[i].weights.as_mut_slice();
                for ((wv, vv), &gv) in w.iter_mut().zip(vel_w[i].iter_mut()).zip(gw) {
                    *vv = cfg.momentum * *vv - lr * clip * gv;
                    *wv += *vv;
                }
                let gb = &out.bias_grads[i];
                for ((bv, vv), &gv) in mlp.layers[i]
                    .bias
                    .iter_mut()
                    .zip(vel_b[i].iter_mut())
                    .zip(gb)
                {
                    *vv = cfg.momentum * *vv - lr * clip * gv;
                    *bv += *vv;
                }
            }
            step += 1;
        }
    }
    let accuracy = evaluate_quantized(&mlp, &cfg.hook, cfg.act_bits, &ranges, test)?;
    Ok(TrainedRun {
        seed,
        mlp,
        act_ranges: ranges,
        accuracy,
    })
}

/// Accuracy of one seed, as reported in a run summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedAccuracy {
    /// The training seed.
    pub seed: u64,
    /// Quantized accuracy on the held-out set.
    pub accuracy: f64,
}

/// Aggregate result of a multi-seed training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    /// Per-seed held-out accuracy, in the order the seeds were given.
    pub per_seed: Vec<SeedAccuracy>,
    /// Mean accuracy over seeds.
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
}

impl RunSummary {
    /// Summarize a set of per-seed accuracies.
    pub fn from_runs(runs: &[(u64, f64)]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Empty {
                what: "seed list".into(),
            });
        }
        let n = runs.len() as f64;
        let mean = runs.iter().map(|&(_, a)| a).sum::<f64>() / n;
        let std = if runs.len() > 1 {
            let var = runs.iter().map(|&(_, a)| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt()
        } else {
            0.0
        };
        Ok(RunSummary {
            per_seed: runs
                .iter()
                .map(|&(seed, accuracy)| SeedAccuracy { seed, accuracy })
                .collect(),
            mean,
            std,
        })
    }
}

/// Train every seed in the configuration and summarize the accuracies.
///
/// Seeds are independent runs; they train sequentially here so results are
/// reproducible on any machine. Returns the summary together with the last
/// seed's trained network.
pub fn ste_train(train: &Dataset, test: &Dataset, cfg: &QatConfig) -> Result<(RunSummary, TrainedRun)> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut last = None;
    for &seed in &cfg.seeds {
        let run = ste_train_single(train, test, cfg, seed)?;
        runs.push((seed, run.accuracy));
        last = Some(run);
    }
    let summary = RunSummary::from_runs(&runs)?;
    Ok((summary, last.expect("at least one seed")))
}

/// Freeze a trained network into a quantized model container.
///
/// Each weight matrix becomes a single-term ternary stack under `op`;
/// activation ranges are stored when activation quantization was on. The
/// container's forward pass reproduces the trainer's quantized forward pass
/// exactly.
pub fn export_quantized(
    mlp: &Mlp,
    op: Operator,
    act_bits: u8,
    ranges: &[f32],
) -> Result<QuantizedModel> {
    if ranges.len() != mlp.num_relus() {
        return Err(Error::InvalidArgument(format!(
            "expected {} activation ranges, got {}",
            mlp.num_relus(),
            ranges.len()
        )));
    }
    let mut layers = Vec::new();
    for (i, layer) in mlp.layers.iter().enumerate() {
        let term = quant::quantize(&layer.weights, op)?;
        layers.push(QuantizedLayer::Dense {
            stack: ExpansionStack::from_terms(op, vec![term])?,
            bias: layer.bias.clone(),
        });
        if i + 1 < mlp.layers.len() {
            layers.push(QuantizedLayer::Passthrough(Layer::Relu));
        }
    }
    let act = if act_bits == 32 {
        None
    } else {
        Some(ActQuantSpec {
            bits: act_bits,
            ranges: ranges.to_vec(),
        })
    };
    Ok(QuantizedModel {
        input: None,
        layers,
        act,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gaussian_mixture;

    fn separable_blobs(seed: u64) -> Dataset {
        let centers = vec![vec![2.0, 2.0], vec![-2.0, -2.0]];
        gaussian_mixture(40, &centers, 0.4, seed).unwrap()
    }

    fn four_blobs(n: usize, seed: u64) -> Dataset {
        let centers = vec![
            vec![2.0, 0.0],
            vec![-2.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, -2.0],
        ];
        gaussian_mixture(n, &centers, 0.5, seed).unwrap()
    }

    fn on_grid_mlp() -> Mlp {
        // Entries limited to {-c, 0, c} per row, so the naive operator's grid
        // (step = row max) reproduces the weights exactly.
        let weights = Tensor::new(
            vec![2, 3],
            vec![0.4, 0.0, -0.4, -0.25, 0.25, 0.0],
        )
        .unwrap();
        Mlp {
            layers: vec![DenseLayer {
                weights,
                bias: vec![0.05, -0.05],
            }],
        }
    }

    /// Cross-entropy of a one-layer linear model, in f64, with no quantizer.
    fn f64_linear_ce(w: &[f64], bias: &[f64], x: &Tensor, labels: &[usize], out: usize) -> f64 {
        let inp = x.row_len();
        let n = x.rows();
        let mut loss = 0.0;
        for (row, &label) in x.as_slice().chunks(inp).zip(labels) {
            let mut logits = vec![0.0f64; out];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = bias[j];
                for (k, &v) in row.iter().enumerate() {
                    acc += w[j * inp + k] * f64::from(v);
                }
                *l = acc;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
            loss -= logits[label] - m - z.ln();
        }
        loss / n as f64
    }

    #[test]
    fn arch_spec_parsing_accepts_mlp_forms() {
        assert_eq!(parse_arch("mlp").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_arch("mlp:16,16").unwrap(), vec![16, 16]);
        assert_eq!(parse_arch("mlp:8").unwrap(), vec![8]);
        assert!(parse_arch("cnn:8").is_err());
        assert!(parse_arch("mlp:0").is_err());
        assert!(parse_arch("mlp:a,b").is_err());
    }

    #[test]
    fn config_validation_rejects_unsupported_settings() {
        let ok = QatConfig::default();
        ok.validate().unwrap();
        let mut bad = QatConfig::default();
        bad.weight_bits = 4;
        assert!(bad.validate().is_err());
        let mut bad = QatConfig::default();
        bad.act_bits = 3;
        assert!(bad.validate().is_err());
        let mut bad = QatConfig::default();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        let mut bad = QatConfig::default();
        bad.epochs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn straight_through_gradient_matches_finite_differences_on_grid() {
        // With weights already on the naive operator's grid, the quantized
        // forward pass equals the float forward pass, so the STE gradient
        // must match a finite-difference gradient of the unquantized loss.
        let mlp = on_grid_mlp();
        let x = Tensor::new(
            vec![4, 3],
            vec![0.9, -0.3, 0.2, -0.7, 0.5, 1.1, 0.1, 0.8, -0.9, 1.3, -0.2, 0.4],
        )
        .unwrap();
        let labels = [0usize, 1, 1, 0];
        let quantized = QuantHook::Op(Operator::Naive).apply(&mlp.layers[0].weights).unwrap();
        assert_eq!(
            quantized.as_slice(),
            mlp.layers[0].weights.as_slice(),
            "test weights must be exactly on the quantizer grid"
        );
        let out = ste_step(
            &mlp,
            &QuantHook::Op(Operator::Naive),
            32,
            &mut [],
            false,
            &x,
            &labels,
        )
        .unwrap();
        let w64: Vec<f64> = mlp.layers[0].weights.as_slice().iter().map(|&v| f64::from(v)).collect();
        let b64: Vec<f64> = mlp.layers[0].bias.iter().map(|&v| f64::from(v)).collect();
        let h = 1e-5;
        for idx in 0..w64.len() {
            let mut plus = w64.clone();
            plus[idx] += h;
            let mut minus = w64.clone();
            minus[idx] -= h;
            let fd = (f64_linear_ce(&plus, &b64, &x, &labels, 2)
                - f64_linear_ce(&minus, &b64, &x, &labels, 2))
                / (2.0 * h);
            let got = f64::from(out.weight_grads[0].as_slice()[idx]);
            let denom = fd.abs().max(1e-3);
            assert!(
                ((got - fd) / denom).abs() < 1e-4,
                "weight grad {idx}: ste {got}, fd {fd}"
            );
        }
        for idx in 0..b64.len() {
            let mut plus = b64.clone();
            plus[idx] += h;
            let mut minus = b64.clone();
            minus[idx] -= h;
            let fd = (f64_linear_ce(&w64, &plus, &x, &labels, 2)
                - f64_linear_ce(&w64, &minus, &x, &labels, 2))
                / (2.0 * h);
            let got = f64::from(out.bias_grads[0][idx]);
            let denom = fd.abs().max(1e-3);
            assert!(
                ((got - fd) / denom).abs() < 1e-4,
                "bias grad {idx}: ste {got}, fd {fd}"
            );
        }
    }

    #[test]
    fn identity_hook_forward_matches_the_float_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::init(&[3, 5, 4], &mut rng).unwrap();
        let data = gaussian_mixture(10, &[vec![0.0; 3], vec![1.0; 3]], 1.0, 3).unwrap();
        let out = ste_step(
            &mlp,
            &QuantHook::Identity,
            32,
            &mut [0.0],
            false,
            &data.features,
            &data.labels,
        )
        .unwrap();
        let graph = mlp.to_graph().unwrap();
        let float_logits = graph.forward(&data.features).unwrap();
        assert_eq!(out.logits.as_slice(), float_logits.as_slice());
    }

    #[test]
    fn training_is_bit_reproducible_per_seed() {
        let train = four_blobs(30, 5);
        let test = four_blobs(10, 6);
        let cfg = QatConfig {
            epochs: 3,
            seeds: vec![42],
            ..QatConfig::default()
        };
        let a = ste_train_single(&train, &test, &cfg, 42).unwrap();
        let b = ste_train_single(&train, &test, &cfg, 42).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.act_ranges, b.act_ranges);
        for (la, lb) in a.mlp.layers.iter().zip(&b.mlp.layers) {
            assert_eq!(la.weights.as_slice(), lb.weights.as_slice());
            assert_eq!(la.bias, lb.bias);
        }
    }

    #[test]
    fn constant_logit_model_scores_the_argmax_class_prior() {
        // All-zero weights produce identical logits; ties resolve to class 0,
        // so accuracy must equal the fraction of class-0 labels.
        let mlp = Mlp {
            layers: vec![DenseLayer {
                weights: Tensor::zeros(vec![4, 2]),
                bias: vec![0.0; 4],
            }],
        };
        let data = four_blobs(15, 9);
        let prior = data.labels.iter().filter(|&&l| l == 0).count() as f64 / data.len() as f64;
        let acc = evaluate_quantized(&mlp, &QuantHook::Op(Operator::TQuant), 32, &[], &data).unwrap();
        assert!((acc - prior).abs() < 1e-12);
    }

    #[test]
    fn separable_task_is_solvable_by_exhaustive_ternary_search() {
        // Oracle: enumerate all 3^4 ternary weight matrices for the 2x2
        // linear model (zero bias). Positive scale cancels in the argmax, so
        // pure codes decide; at least one assignment must classify the blobs
        // perfectly, which certifies the task for any ternary trainer.
        let data = separable_blobs(17);
        let mut best = 0.0f32;
        for a in -1i32..=1 {
            for b in -1i32..=1 {
                for c in -1i32..=1 {
                    for d in -1i32..=1 {
                        let w = [a as f32, b as f32, c as f32, d as f32];
                        let mut correct = 0usize;
                        for (row, &label) in data.features.as_slice().chunks(2).zip(&data.labels) {
                            let l0 = w[0] * row[0] + w[1] * row[1];
                            let l1 = w[2] * row[0] + w[3] * row[1];
                            let pred = usize::from(l1 > l0);
                            correct += usize::from(pred == label);
                        }
                        best = best.max(correct as f32 / data.len() as f32);
                    }
                }
            }
        }
        assert!(
            best >= 1.0,
            "ternary oracle should separate the blobs perfectly, best {best}"
        );
    }

    #[test]
    fn every_operator_reaches_95_percent_on_the_separable_task() {
        let train = separable_blobs(17);
        let test = separable_blobs(18);
        for op in Operator::all() {
            let cfg = QatConfig {
                arch: "mlp".into(),
                epochs: 20,
                learning_rate: 0.05,
                act_bits: 32,
                hook: QuantHook::Op(op),
                seeds: vec![1],
                ..QatConfig::default()
            };
            let run = ste_train_single(&train, &test, &cfg, 1).unwrap();
            assert!(
                run.accuracy >= 0.95,
                "{op} reached only {:.3} on a linearly separable task",
                run.accuracy
            );
        }
    }

    #[test]
    fn exported_container_reproduces_the_trainer_forward_pass() {
        let train = four_blobs(40, 21);
        let test = four_blobs(15, 22);
        let cfg = QatConfig {
            arch: "mlp:8".into(),
            epochs: 5,
            seeds: vec![3],
            ..QatConfig::default()
        };
        let run = ste_train_single(&train, &test, &cfg, 3).unwrap();
        let container = export_quantized(&run.mlp, Operator::TQuant, cfg.act_bits, &run.act_ranges).unwrap();
        let container_logits = container.forward(&test.features).unwrap();
        let mut frozen = run.act_ranges.clone();
        let trainer = forward_batch(
            &run.mlp,
            &QuantHook::Op(Operator::TQuant),
            cfg.act_bits,
            &mut frozen,
            false,
            &test.features,
        )
        .unwrap();
        assert_eq!(container_logits.as_slice(), trainer.logits.as_slice());
        let acc = tensor::accuracy(&container_logits, &test.labels).unwrap();
        assert!((f64::from(acc) - run.accuracy).abs() < 1e-12);
    }

    #[test]
    fn reported_accuracy_equals_a_fresh_evaluation() {
        let train = four_blobs(40, 31);
        let test = four_blobs(15, 32);
        let cfg = QatConfig {
            arch: "mlp:8".into(),
            epochs: 4,
            seeds: vec![7, 8],
            ..QatConfig::default()
        };
        let (summary, last) = ste_train(&train, &test, &cfg).unwrap();
        assert_eq!(summary.per_seed.len(), 2);
        let again = evaluate_quantized(&last.mlp, &cfg.hook, cfg.act_bits, &last.act_ranges, &test).unwrap();
        assert_eq!(again, last.accuracy);
        assert_eq!(summary.per_seed[1].accuracy, last.accuracy);
        let mean = (summary.per_seed[0].accuracy + summary.per_seed[1].accuracy) / 2.0;
        assert!((summary.mean - mean).abs() < 1e-15);
    }

    #[test]
    fn quantized_training_trend_across_operators() {
        // Eight blobs on a ring leave no slack for lost capacity: the
        // un-widened grid's dead zone swallows most weights and the naive
        // runs land far behind, with the widened operators ahead and the
        // max-error-optimal one both best and most consistent across seeds.
        let train = crate::dataset::ring_of_blobs(8, 40, 2.0, 0.45, 73).unwrap();
        let test = crate::dataset::ring_of_blobs(8, 25, 2.0, 0.45, 74).unwrap();
        let seeds = vec![0, 1, 2, 3, 4];
        let mut means = std::collections::BTreeMap::new();
        let mut stds = std::collections::BTreeMap::new();
        for op in Operator::all() {
            let cfg = QatConfig {
                epochs: 25,
                hook: QuantHook::Op(op),
                seeds: seeds.clone(),
                ..QatConfig::default()
            };
            let (summary, _) = ste_train(&train, &test, &cfg).unwrap();
            means.insert(op.to_string(), summary.mean);
            stds.insert(op.to_string(), summary.std);
        }
        assert!(
            means["tquant"] >= means["mquant"] && means["mquant"] >= means["naive"],
            "expected tquant {:.3} >= mquant {:.3} >= naive {:.3}",
            means["tquant"],
            means["mquant"],
            means["naive"]
        );
        assert!(
            means["tquant"] >= means["naive"] + 0.05,
            "tquant {:.3} should beat naive {:.3} by 5 points",
            means["tquant"],
            means["naive"]
        );
        assert!(
            stds["tquant"] <= stds["naive"],
            "tquant std {:.4} should not exceed naive std {:.4}",
            stds["tquant"],
            stds["naive"]
        );
    }

    #[test]
    fn divergent_learning_rate_reports_non_finite_loss() {
        let train = four_blobs(30, 51);
        let test = four_blobs(10, 52);
        let cfg = QatConfig {
            epochs: 40,
            learning_rate: 1e4,
            seeds: vec![0],
            ..QatConfig::default()
        };
        match ste_train_single(&train, &test, &cfg, 0) {
            Err(Error::NonFiniteLoss { .. }) => {}
            Err(e) => panic!("expected a non-finite loss report, got {e}"),
            Ok(run) => {
                // A blow-up is overwhelmingly likely at this rate, but if the
                // run survives it must still produce a finite accuracy.
                assert!(run.accuracy.is_finite());
            }
        }
    }
}
