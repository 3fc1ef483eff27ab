//! Post-training rounding optimization on a calibration set.
//!
//! Nearest rounding on the ternary grid minimizes per-weight error but not
//! the layer's output error. This module learns, per weight scalar, whether
//! to round the step-ratio `w/s` up or down: a continuous logit `V` per
//! weight parameterizes a rectified sigmoid `h(V) ∈ [0, 1]`, the soft weight
//! is `s · clamp(floor(w/s) + h, -1, 1)`, and gradient descent minimizes the
//! layer reconstruction error plus a rounding penalty that anneals from
//! ignorable to dominant, forcing every `h` to a hard 0/1 decision by the
//! end. The procedure reads only the per-row steps, never which operator
//! produced them, so any scaling rule plugs in unchanged.
//!
//! Models are processed front to back: each layer is fitted against the
//! activations produced by the already-quantized prefix, so later layers
//! compensate the errors of earlier ones.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{QuantizedLayer, QuantizedModel};
use crate::linalg;
use crate::quant::{self, ExpansionStack, Operator, TernaryTensor};
use crate::tensor::{self, Layer, ModelGraph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Factor by which the rounding-penalty weight grows over the saturation
/// phase (the last fifth of the iterations). Large enough that the penalty
/// overwhelms any residual reconstruction pull and pins every rounding value
/// to a pole by the final iteration.
const SATURATION_RAMP: f64 = 1000.0;

/// Fraction of the iterations spent annealing the penalty exponent before
/// the saturation phase begins.
const ANNEAL_FRACTION: f64 = 0.8;

/// Logit magnitude deep inside the rectified sigmoid's saturated region;
/// used to commit rounding decisions that the grid clamp has already made.
const PINNED_LOGIT: f64 = 12.0;

/// Hyperparameters for the rounding fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtqConfig {
    /// Gradient steps per layer.
    pub iterations: usize,
    /// Learning rate on the rounding logits.
    pub learning_rate: f64,
    /// Base weight of the rounding penalty.
    pub reg_weight: f64,
    /// Initial penalty exponent (flat penalty, lets weights move freely).
    pub beta_start: f64,
    /// Final penalty exponent (concave penalty, forces 0/1 decisions).
    pub beta_end: f64,
    /// Calibration rows per step; 0 uses the full set every step.
    pub batch_size: usize,
    /// Seed for batch order.
    pub seed: u64,
}

impl Default for PtqConfig {
    fn default() -> Self {
        PtqConfig {
            iterations: 1000,
            learning_rate: 0.05,
            reg_weight: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl PtqConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "rounding fit needs at least one iteration".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !self.reg_weight.is_finite() || self.reg_weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "penalty weight must be non-negative, got {}",
                self.reg_weight
            )));
        }
        if self.beta_start < self.beta_end || self.beta_end < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "penalty exponent must anneal downward to at least 1, got {} -> {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    /// Penalty exponent and weight at one iteration: the exponent anneals
    /// linearly high → low over the first [`ANNEAL_FRACTION`] of the run,
    /// then the weight ramps up by [`SATURATION_RAMP`] to saturate every
    /// rounding decision.
    fn schedule(&self, iteration: usize) -> (f64, f64) {
        let t = iteration as f64 / self.iterations as f64;
        if t < ANNEAL_FRACTION {
            let frac = t / ANNEAL_FRACTION;
            (
                self.beta_start + (self.beta_end - self.beta_start) * frac,
                self.reg_weight,
            )
        } else {
            let frac = (t - ANNEAL_FRACTION) / (1.0 - ANNEAL_FRACTION);
            (
                self.beta_end,
                self.reg_weight * (1.0 + (SATURATION_RAMP - 1.0) * frac),
            )
        }
    }
}

/// Per-weight rounding decisions under optimization: the down-rounded base
/// code, a logit per weight, and the per-row steps they are priced against.
#[derive(Debug, Clone)]
pub struct RoundingState {
    shape: Vec<usize>,
    /// `floor(w / s)` per weight (0 for zero-step rows).
    base: Vec<f64>,
    /// Continuous rounding logits, one per weight.
    v: Vec<f64>,
    /// Per-row effective steps.
    steps: Vec<f64>,
    width: usize,
}

/// Rectified sigmoid `clip(1.2·σ(v) − 0.1, 0, 1)`: covers [0, 1] with exact
/// saturation at both ends, so finished decisions are hard zeros and ones.
fn rectified_sigmoid(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    (1.2 * s - 0.1).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero in the saturated regions.
fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    let h = 1.2 * s - 0.1;
    if (0.0..=1.0).contains(&h) {
        1.2 * s * (1.0 - s)
    } else {
        0.0
    }
}

impl RoundingState {
    /// Start from nearest rounding: logits are initialized so that
    /// `h = w/s − floor(w/s)` exactly, making the soft weights reproduce the
    /// float weights (up to grid clamping) at iteration zero.
    pub fn init(weights: &Tensor, steps: &[f64]) -> Result<Self> {
        if !weights.all_finite() {
            return Err(Error::NonFinite {
                location: "rounding fit weights".into(),
            });
        }
        let rows = weights.rows();
        if steps.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{rows} weight rows but {} steps",
                steps.len()
            )));
        }
        if steps.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::NonFinite {
                location: "rounding fit steps".into(),
            });
        }
        let width = weights.row_len();
        let mut base = vec![0.0f64; weights.len()];
        let mut v = vec![0.0f64; weights.len()];
        for (i, (b, lv)) in base.iter_mut().zip(v.iter_mut()).enumerate() {
            let step = steps[i / width];
            let (floor, frac) = if step == 0.0 {
                (0.0, 0.0)
            } else {
                let ratio = f64::from(weights.as_slice()[i]) / step;
                (ratio.floor(), ratio - ratio.floor())
            };
            *b = floor;
            // Weights whose down-rounded code already leaves the ternary grid
            // are decided by the clamp alone: no rounding choice can change
            // their hard code, and the clamp also blocks the reconstruction
            // gradient. Commit their logits to the matching pole at init so
            // they end saturated instead of idling wherever they started
            // (the row extremum always lands here for widened operators).
            *lv = if floor >= 1.0 {
                PINNED_LOGIT
            } else if floor <= -2.0 {
                -PINNED_LOGIT
            } else {
                // Invert the rectified sigmoid at `frac`.
                ((frac + 0.1) / (1.1 - frac)).ln()
            };
        }
        Ok(RoundingState {
            shape: weights.shape().to_vec(),
            base,
            v,
            steps: steps.to_vec(),
            width,
        })
    }

    /// Current rounding values `h(V)`, one per weight.
    pub fn h(&self) -> Vec<f64> {
        self.v.iter().map(|&v| rectified_sigmoid(v)).collect()
    }

    /// Soft weights `s · clamp(base + h, -1, 1)`.
    pub fn soft_weights(&self) -> Tensor {
        let data: Vec<f32> = self
            .base
            .iter()
            .zip(&self.v)
            .enumerate()
            .map(|(i, (&b, &v))| {
                let step = self.steps[i / self.width];
                (step * (b + rectified_sigmoid(v)).clamp(-1.0, 1.0)) as f32
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("state shape is consistent")
    }

    /// Hard codes: round up where `h > 0.5`, then clamp to the ternary set.
    pub fn harden(&self) -> Vec<i8> {
        self.base
            .iter()
            .zip(&self.v)
            .map(|(&b, &v)| {
                let up = if rectified_sigmoid(v) > 0.5 { 1.0 } else { 0.0 };
                (b + up).clamp(-1.0, 1.0) as i8
            })
            .collect()
    }
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    /// Iteration index.
    pub iteration: usize,
    /// Mean squared reconstruction error over the step's batch.
    pub reconstruction: f64,
    /// Unweighted rounding penalty `Σ (1 − |2h − 1|^β)`.
    pub penalty: f64,
    /// Penalty exponent in effect.
    pub beta: f64,
    /// Penalty weight in effect.
    pub reg_weight: f64,
}

/// Outcome of fitting one layer's rounding.
#[derive(Debug, Clone)]
pub struct RoundingFit {
    /// Hard ternary codes.
    pub codes: Vec<i8>,
    /// Final rounding values; all within the saturation tolerance of {0, 1}
    /// once the schedule has completed.
    pub rounding_values: Vec<f64>,
    /// Loss trajectory, one sample per iteration.
    pub trajectory: Vec<LossSample>,
    /// Full-batch reconstruction loss of plain nearest rounding.
    pub nearest_loss: f64,
    /// Full-batch reconstruction loss of the fitted codes.
    pub fitted_loss: f64,
}

fn select_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let width = t.row_len();
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![indices.len(), width], data).expect("selected rows keep the width")
}

/// Mean squared error of `calib · wᵀ` against `target`, per batch row.
fn reconstruction_loss(calib: &Tensor, target: &Tensor, weights: &Tensor) -> f64 {
    let n = calib.rows();
    let pred = linalg::matmul_nt(
        calib.as_slice(),
        weights.as_slice(),
        n,
        calib.row_len(),
        weights.rows(),
    );
    let mut sum = 0.0f64;
    for (p, t) in pred.iter().zip(target.as_slice()) {
        let d = f64::from(*p) - f64::from(*t);
        sum += d * d;
    }
    sum / n as f64
}

/// Learn up/down rounding for one weight matrix against calibration inputs.
///
/// `steps` are the per-row grid steps (from whichever scaling rule is in
/// play — this function never learns which). `label` names the layer in
/// diagnostics. The reconstruction target is the float layer output
/// `calib · weightsᵀ`; biases cancel and are ignored.
pub fn fit_rounding(
    weights: &Tensor,
    steps: &[f64],
    calib: &Tensor,
    cfg: &PtqConfig,
    label: &str,
) -> Result<RoundingFit> {
    cfg.validate()?;
    if calib.rows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if !calib.all_finite() {
        return Err(Error::NonFinite {
            location: format!("calibration inputs for layer {label}"),
        });
    }
    if calib.row_len() != weights.row_len() {
        return Err(Error::ShapeMismatch {
            layer: label.to_string(),
            detail: format!(
                "calibration width {} does not match weight width {}",
                calib.row_len(),
                weights.row_len()
            ),
        });
    }
    let mut state = RoundingState::init(weights, steps)?;
    let n = calib.rows();
    let (rows, width) = (weights.rows(), weights.row_len());
    let target = {
        let y = linalg::matmul_nt(calib.as_slice(), weights.as_slice(), n, width, rows);
        Tensor::new(vec![n, rows], y)?
    };

    let batch = if cfg.batch_size == 0 || cfg.batch_size >= n {
        n
    } else {
        cfg.batch_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle when batching
    let mut trajectory = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let (bx_store, bt_store);
        // Full batch avoids the row copies entirely.
        let (batch_x, batch_t): (&Tensor, &Tensor) = if batch == n {
            (calib, &target)
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            bx_store = select_rows(calib, idx);
            bt_store = select_rows(&target, idx);
            (&bx_store, &bt_store)
        };

        let soft = state.soft_weights();
        let nb = batch_x.rows();
        let pred = linalg::matmul_nt(batch_x.as_slice(), soft.as_slice(), nb, width, rows);
        let mut err = vec![0.0f32; pred.len()];
        let mut rec_loss = 0.0f64;
        for ((e, p), t) in err.iter_mut().zip(&pred).zip(batch_t.as_slice()) {
            *e = t - p;
            rec_loss += f64::from(*e) * f64::from(*e);
        }
        rec_loss /= nb as f64;
        if !rec_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                layer: label.to_string(),
                iteration,
            });
        }

        // d(rec)/d(soft W) = -(2/nb) · errᵀ · X, shape [rows, width].
        let grad_w = linalg::matmul_tn(&err, batch_x.as_slice(), nb, rows, width);
        let scale = -2.0 / nb as f64;

        let (beta, reg_weight) = cfg.schedule(iteration);
        let mut penalty = 0.0f64;
        for i in 0..state.v.len() {
            let step = state.steps[i / width];
            let h = rectified_sigmoid(state.v[i]);
            let centered = 2.0 * h - 1.0;
            penalty += 1.0 - centered.abs().powf(beta);
            let u = state.base[i] + h;
            let mut grad_h = if (-1.0..=1.0).contains(&u) {
                scale * f64::from(grad_w[i]) * step
            } else {
                0.0 // clamped against the ternary grid edge
            };
            grad_h += reg_weight * (-2.0 * beta * centered.signum() * centered.abs().powf(beta - 1.0));
            let grad_v = grad_h * rectified_sigmoid_grad(state.v[i]);
            state.v[i] -= cfg.learning_rate * grad_v;
        }
        trajectory.push(LossSample {
            iteration,
            reconstruction: rec_loss,
            penalty,
            beta,
            reg_weight,
        });
    }

    let codes = state.harden();
    let nearest = quant_nearest(weights, steps);
    let fitted_loss = {
        let t = dequant_codes(&codes, steps, weights.shape(), width);
        reconstruction_loss(calib, &target, &t)
    };
    let nearest_loss = {
        let t = dequant_codes(&nearest, steps, weights.shape(), width);
        reconstruction_loss(calib, &target, &t)
    };
    Ok(RoundingFit {
        codes,
        rounding_values: state.h(),
        trajectory,
        nearest_loss,
        fitted_loss,
    })
}

/// Nearest-rounding codes on the step grid (ties away from zero).
fn quant_nearest(weights: &Tensor, steps: &[f64]) -> Vec<i8> {
    let width = weights.row_len();
    weights
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let step = steps[i / width];
            if step == 0.0 {
                0
            } else {
                (f64::from(w) / step).round().clamp(-1.0, 1.0) as i8
            }
        })
        .collect()
}

fn dequant_codes(codes: &[i8], steps: &[f64], shape: &[usize], width: usize) -> Tensor {
    let data: Vec<f32> = codes
        .iter()
        .enumerate()
        .map(|(i, &c)| (f64::from(c) * steps[i / width]) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("codes match shape")
}

/// Fit one layer with the scales of the given operator and return the
/// ternary tensor plus the loss trajectory.
pub fn adaround_fit(
    weights: &Tensor,
    op: Operator,
    calib: &Tensor,
    cfg: &PtqConfig,
    label: &str,
) -> Result<(TernaryTensor, RoundingFit)> {
    let reference = quant::quantize(weights, op)?;
    let steps: Vec<f64> = reference.scales().iter().map(|&s| f64::from(s)).collect();
    let fit = fit_rounding(weights, &steps, calib, cfg, label)?;
    let tensor = TernaryTensor::from_parts(
        weights.shape().to_vec(),
        fit.codes.clone(),
        reference.scales().to_vec(),
        op,
    )?;
    Ok((tensor, fit))
}

/// Loss trajectory of one fitted layer, for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerTrajectory {
    /// Layer identifier (`index:kind`).
    pub layer: String,
    /// Recorded optimization steps.
    pub samples: Vec<LossSample>,
    /// Full-batch nearest-rounding reconstruction loss.
    pub nearest_loss: f64,
    /// Full-batch fitted reconstruction loss.
    pub fitted_loss: f64,
}

/// Quantize every weight layer of a model with learned rounding, front to
/// back: each layer is calibrated on the activations of the already-quantized
/// prefix, and non-weight layers pass through unchanged. Activations stay in
/// full precision.
pub fn ptq_quantize_model(
    model: &ModelGraph,
    calib: &Dataset,
    op: Operator,
    cfg: &PtqConfig,
) -> Result<(QuantizedModel, Vec<LayerTrajectory>)> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut current = model.adapt_input(&calib.features)?;
    let mut cache: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut trajectories = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let label = tensor::layer_name(i, layer);
        let (quantized_layer, executed): (QuantizedLayer, Layer) = match layer {
            Layer::Dense { weights, bias } => {
                let (tt, fit) = adaround_fit(weights, op, &current, cfg, &label)?;
                trajectories.push(LayerTrajectory {
                    layer: label.clone(),
                    samples: fit.trajectory,
                    nearest_loss: fit.nearest_loss,
                    fitted_loss: fit.fitted_loss,
                });
                let deq = tt.dequantize();
                (
                    QuantizedLayer::Dense {
                        stack: ExpansionStack::from_terms(op, vec![tt])?,
                        bias: bias.clone(),
                    },
                    Layer::Dense {
                        weights: deq,
                        bias: bias.clone(),
                    },
                )
            }
            Layer::Conv2d {
                weights,
                bias,
                stride,
                padding,
            } => {
                let (kh, kw) = (weights.shape()[2], weights.shape()[3]);
                let (patches, _, _) = tensor::im2col(&current, kh, kw, *stride, *padding, &label)?;
                let flat = weights.reshape(vec![weights.shape()[0], weights.row_len()])?;
                let (tt_flat, fit) = adaround_fit(&flat, op, &patches, cfg, &label)?;
                trajectories.push(LayerTrajectory {
                    layer: label.clone(),
                    samples: fit.trajectory,
                    nearest_loss: fit.nearest_loss,
                    fitted_loss: fit.fitted_loss,
                });
                let tt = TernaryTensor::from_parts(
                    weights.shape().to_vec(),
                    tt_flat.codes().to_vec(),
                    tt_flat.scales().to_vec(),
                    op,
                )?;
                let deq = tt.dequantize();
                (
                    QuantizedLayer::Conv2d {
                        stack: ExpansionStack::from_terms(op, vec![tt])?,
                        bias: bias.clone(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::Conv2d {
                        weights: deq,
                        bias: bias.clone(),
                        stride: *stride,
                        padding: *padding,
                    },
                )
            }
            other => (QuantizedLayer::Passthrough(other.clone()), other.clone()),
        };
        current = tensor::apply_layer(&executed, &current, &cache, i)?;
        cache.push(current.clone());
        layers.push(quantized_layer);
    }
    Ok((
        QuantizedModel {
            input: model.input.clone(),
            layers,
            act: None,
        },
        trajectories,
    ))
}
