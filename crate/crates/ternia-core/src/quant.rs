//! Three-level weight quantizers, residual expansions, and activation
//! quantizers.
//!
//! All ternary operators share one shape: a per-row symmetric scale
//! `lambda = max(|row min|, |row max|)`, an effective step `s` proportional to
//! `lambda`, and codes `clamp(round(w / s), -1, 1)` with ties rounded half
//! away from zero. They differ only in the step factor:
//!
//! * [`Operator::Naive`] — `s = lambda`. Rounding on this grid zeroes
//!   everything inside `(-lambda/2, lambda/2)`, which for bell-shaped rows is
//!   almost all weights.
//! * [`Operator::TQuant`] — `s = (2/3) lambda`. The three code pre-images
//!   split `[-lambda, lambda]` into equal thirds and the reconstruction error
//!   is bounded by `lambda / 3`.
//! * [`Operator::MQuant`] — `s = lambda * 5/(7 sqrt 2)`. Minimizes the
//!   expected squared reconstruction error when weights follow a centered
//!   Gaussian; see the [`crate::gauss`] module for the analysis and the
//!   numerical verification of this constant.
//!
//! Step arithmetic runs in `f64` (stored scales are the `f32` rounding of the
//! exact step), so the effective step tracks the defining formula to within
//! one double-precision ulp.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Step factor of [`Operator::MQuant`]: `5 / (7 sqrt 2)`.
pub const MQUANT_STEP_FACTOR: f64 = 5.0 / (7.0 * std::f64::consts::SQRT_2);

/// Step factor of [`Operator::TQuant`]: `2 / 3`.
pub const TQUANT_STEP_FACTOR: f64 = 2.0 / 3.0;

/// Ternary quantization operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Step equal to the row extremum.
    Naive,
    /// Step equal to two thirds of the row extremum.
    TQuant,
    /// Step equal to `5/(7 sqrt 2)` times the row extremum.
    MQuant,
}

impl Operator {
    /// Multiplier applied to the row extremum to obtain the step.
    pub fn step_factor(self) -> f64 {
        match self {
            Operator::Naive => 1.0,
            Operator::TQuant => TQUANT_STEP_FACTOR,
            Operator::MQuant => MQUANT_STEP_FACTOR,
        }
    }

    /// Exact (double-precision) step for a row with extremum `lambda`.
    pub fn effective_step(self, lambda: f32) -> f64 {
        f64::from(lambda) * self.step_factor()
    }

    /// All operators, in presentation order.
    pub fn all() -> [Operator; 3] {
        [Operator::Naive, Operator::TQuant, Operator::MQuant]
    }
}

impl std::str::FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Operator::Naive),
            "tquant" => Ok(Operator::TQuant),
            "mquant" => Ok(Operator::MQuant),
            other => Err(Error::InvalidArgument(format!(
                "unknown operator {other:?}; expected naive, tquant, or mquant"
            ))),
        }
    }
}

impl std::fmt::Display for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Operator::Naive => "naive",
            Operator::TQuant => "tquant",
            Operator::MQuant => "mquant",
        })
    }
}

/// Ternary tensor: codes in `{-1, 0, 1}` plus one positive scale per row
/// (zero scale only for all-zero rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryTensor {
    shape: Vec<usize>,
    codes: Vec<i8>,
    scale: Vec<f32>,
    op: Operator,
}

impl TernaryTensor {
    /// Assemble from parts, validating invariants. Used by container I/O.
    pub fn from_parts(
        shape: Vec<usize>,
        codes: Vec<i8>,
        scale: Vec<f32>,
        op: Operator,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let rows = shape.first().copied().unwrap_or(0);
        if codes.len() != n {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} expects {n} codes, got {}",
                codes.len()
            )));
        }
        if scale.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{rows} rows but {} scales",
                scale.len()
            )));
        }
        if codes.iter().any(|&c| !(-1..=1).contains(&c)) {
            return Err(Error::InvalidArgument(
                "ternary codes must lie in {-1, 0, 1}".into(),
            ));
        }
        if scale.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::NonFinite {
                location: "ternary scales".into(),
            });
        }
        Ok(TernaryTensor {
            shape,
            codes,
            scale,
            op,
        })
    }

    /// Tensor shape.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of rows (leading axis).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Flat codes, row-major.
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    /// Per-row scales (the `f32` rounding of the exact step).
    pub fn scales(&self) -> &[f32] {
        &self.scale
    }

    /// Operator that produced this tensor.
    pub fn op(&self) -> Operator {
        self.op
    }

    /// Reconstruct the dense tensor: `code * scale` per element.
    pub fn dequantize(&self) -> Tensor {
        let w = self.row_len();
        let mut data = vec![0.0f32; self.codes.len()];
        for (i, chunk) in data.chunks_mut(w).enumerate() {
            let s = self.scale[i];
            for (v, &c) in chunk.iter_mut().zip(&self.codes[i * w..(i + 1) * w]) {
                *v = f32::from(c) * s;
            }
        }
        Tensor::new(self.shape.clone(), data).expect("codes match shape by construction")
    }

    /// Counts of negative, zero, and positive codes.
    pub fn histogram(&self) -> (usize, usize, usize) {
        let mut neg = 0;
        let mut zero = 0;
        let mut pos = 0;
        for &c in &self.codes {
            match c {
                -1 => neg += 1,
                0 => zero += 1,
                _ => pos += 1,
            }
        }
        (neg, zero, pos)
    }

    /// Fraction of codes equal to zero.
    pub fn zero_fraction(&self) -> f64 {
        if self.codes.is_empty() {
            return 0.0;
        }
        let (_, zero, _) = self.histogram();
        zero as f64 / self.codes.len() as f64
    }
}

/// Per-row symmetric ternary scale: `max(|row min|, |row max|)`.
pub fn ternary_scale(w: &Tensor) -> Result<Vec<f32>> {
    Ok(w.row_minmax()?
        .into_iter()
        .map(|(lo, hi)| lo.abs().max(hi.abs()))
        .collect())
}

/// Per-row scale for a signed `bits`-wide integer grid with asymmetric limits
/// `[-2^(b-1), 2^(b-1) - 1]`: `max(|min| / 2^(b-1), |max| / (2^(b-1) - 1))`.
///
/// This is the general-width rule; the ternary operators deliberately use the
/// symmetric [`ternary_scale`] instead so that positive and negative weights
/// saturate at the same magnitude.
pub fn compute_scale(w: &Tensor, bits: u8) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let half = f32::from(2u8).powi(i32::from(bits) - 1);
    Ok(w.row_minmax()?
        .into_iter()
        .map(|(lo, hi)| (lo.abs() / half).max(hi.abs() / (half - 1.0)))
        .collect())
}

fn check_bits(bits: u8) -> Result<()> {
    if matches!(bits, 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported bit-width {bits}; expected 2, 4, or 8"
        )))
    }
}

/// Quantize a tensor row-by-row with the given operator.
///
/// Each row uses the symmetric scale `lambda = max|w|`, step
/// `s = step_factor * lambda` (computed in `f64`), and codes
/// `clamp(round(w / s), -1, 1)` with ties away from zero. All-zero rows
/// produce zero codes and a zero scale.
pub fn quantize(w: &Tensor, op: Operator) -> Result<TernaryTensor> {
    if !w.all_finite() {
        return Err(Error::NonFinite {
            location: "quantization input".into(),
        });
    }
    let lambdas = ternary_scale(w)?;
    let width = w.row_len();
    let mut codes = vec![0i8; w.len()];
    let mut scales = vec![0.0f32; lambdas.len()];
    for (i, &lambda) in lambdas.iter().enumerate() {
        if lambda == 0.0 {
            continue; // zero row: zero codes, zero scale
        }
        let step = op.effective_step(lambda);
        scales[i] = step as f32;
        let row = w.row(i);
        let out = &mut codes[i * width..(i + 1) * width];
        for (c, &v) in out.iter_mut().zip(row) {
            *c = ternary_code(f64::from(v), step);
        }
    }
    TernaryTensor::from_parts(w.shape().to_vec(), codes, scales, op)
}

/// `clamp(round(v / step), -1, 1)` with ties rounded half away from zero.
#[inline]
fn ternary_code(v: f64, step: f64) -> i8 {
    // f64::round ties away from zero, which is exactly the tie rule here.
    let r = (v / step).round();
    if r > 1.0 {
        1
    } else if r < -1.0 {
        -1
    } else {
        r as i8
    }
}

/// Reconstruct a dense tensor from a ternary tensor.
pub fn dequantize(t: &TernaryTensor) -> Tensor {
    t.dequantize()
}

/// Residual expansion: an ordered sum of ternary terms approximating one
/// dense tensor.
///
/// Term `j` quantizes the residual left by terms `0..j`, so each term's row
/// extrema contract geometrically (by the operator's worst-case relative
/// error: 1/2 for naive, 1/3 for the balanced operator, `1 - 5/(7 sqrt 2)`
/// for the Gaussian-optimal one).
#[derive(Debug, Clone)]
pub struct ExpansionStack {
    shape: Vec<usize>,
    op: Operator,
    terms: Vec<TernaryTensor>,
}

impl ExpansionStack {
    /// Shape of the approximated tensor.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Operator shared by every term.
    pub fn op(&self) -> Operator {
        self.op
    }

    /// Ordered ternary terms.
    pub fn terms(&self) -> &[TernaryTensor] {
        &self.terms
    }

    /// Number of terms.
    pub fn order(&self) -> usize {
        self.terms.len()
    }

    /// Assemble from parts (container I/O); terms must share shape and op.
    pub fn from_terms(op: Operator, terms: Vec<TernaryTensor>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| Error::InvalidArgument(
            "expansion requires at least one term".into(),
        ))?;
        let shape = first.shape().to_vec();
        for t in &terms {
            if t.shape() != shape.as_slice() || t.op() != op {
                return Err(Error::InvalidArgument(
                    "expansion terms must share shape and operator".into(),
                ));
            }
        }
        Ok(ExpansionStack { shape, op, terms })
    }

    /// Sum of all dequantized terms.
    pub fn dequantize(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.shape.clone());
        for term in &self.terms {
            let d = term.dequantize();
            for (a, v) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *a += v;
            }
        }
        acc
    }
}

/// Expand `w` into `order` ternary terms (order must be at least 1).
///
/// Returns the stack together with the final residual `w - dequantize(stack)`.
pub fn expand(w: &Tensor, op: Operator, order: usize) -> Result<(ExpansionStack, Tensor)> {
    if order == 0 {
        return Err(Error::InvalidArgument(
            "expansion order must be at least 1".into(),
        ));
    }
    let mut residual = w.clone();
    let mut terms = Vec::with_capacity(order);
    for _ in 0..order {
        let term = quantize(&residual, op)?;
        let deq = term.dequantize();
        for (r, v) in residual.as_mut_slice().iter_mut().zip(deq.as_slice()) {
            *r -= v;
        }
        terms.push(term);
    }
    Ok((ExpansionStack::from_terms(op, terms)?, residual))
}

/// Per-channel activation range derived from batch-normalization parameters:
/// `|beta| + n_sigmas * |gamma|`.
///
/// Post-normalization activations in channel `c` are (approximately)
/// Gaussian with mean `beta_c` and standard deviation `|gamma_c|`, so this
/// range covers all but the `n_sigmas`-sigma tail mass.
pub fn act_range_from_bn(gamma: &[f32], beta: &[f32], n_sigmas: f32) -> Result<Vec<f32>> {
    if gamma.len() != beta.len() {
        return Err(Error::InvalidArgument(format!(
            "gamma has {} channels but beta has {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(gamma
        .iter()
        .zip(beta)
        .map(|(g, b)| b.abs() + n_sigmas * g.abs())
        .collect())
}

/// `bits`-wide quantized activation tensor with one scale (step) per channel.
///
/// The channel axis is axis 1: features for `[n, d]` tensors, channels for
/// `[n, c, h, w]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensorB {
    shape: Vec<usize>,
    codes: Vec<i8>,
    scale: Vec<f32>,
    bits: u8,
}

impl QuantizedTensorB {
    /// Tensor shape.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat integer codes in `[-2^(b-1), 2^(b-1) - 1]`.
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    /// Per-channel steps.
    pub fn scales(&self) -> &[f32] {
        &self.scale
    }

    /// Bit width (2, 4, or 8).
    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Reconstruct: `code * channel step`.
    pub fn dequantize(&self) -> Tensor {
        let channels = self.scale.len();
        let spatial: usize = if self.shape.len() > 2 {
            self.shape[2..].iter().product()
        } else {
            1
        };
        let mut data = vec![0.0f32; self.codes.len()];
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / spatial) % channels;
            *v = f32::from(self.codes[i]) * self.scale[ch];
        }
        Tensor::new(self.shape.clone(), data).expect("codes match shape by construction")
    }
}

/// Quantize activations to `bits` bits against per-channel ranges `lambda`.
///
/// At two bits the ternary operator's step applies (`step_factor * lambda`,
/// codes in `{-1, 0, 1}`). At wider widths the grid is the signed integer
/// range `[-2^(b-1), 2^(b-1) - 1]` with step `lambda / 2^(b-1)` — the
/// symmetric-range case where the negative extremum pins the step — and the
/// operator plays no role. Channels with `lambda = 0` emit zero codes.
pub fn quantize_activations(
    x: &Tensor,
    bits: u8,
    lambda: &[f32],
    op: Operator,
) -> Result<QuantizedTensorB> {
    check_bits(bits)?;
    if !x.all_finite() {
        return Err(Error::NonFinite {
            location: "activation quantization input".into(),
        });
    }
    if x.shape().len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "activation tensors must have a channel axis, got shape {:?}",
            x.shape()
        )));
    }
    let channels = x.shape()[1];
    if lambda.len() != channels {
        return Err(Error::InvalidArgument(format!(
            "{channels} channels but {} ranges",
            lambda.len()
        )));
    }
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::NonFinite {
            location: "activation ranges".into(),
        });
    }
    let spatial: usize = if x.shape().len() > 2 {
        x.shape()[2..].iter().product()
    } else {
        1
    };
    let half = 1i32 << (bits - 1);
    let (lo, hi) = (-half, half - 1);
    let mut codes = vec![0i8; x.len()];
    let mut scale = vec![0.0f32; channels];
    for (ch, &l) in lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        scale[ch] = if bits == 2 {
            op.effective_step(l) as f32
        } else {
            (f64::from(l) / f64::from(half)) as f32
        };
    }
    for (i, (&v, c)) in x.as_slice().iter().zip(codes.iter_mut()).enumerate() {
        let ch = (i / spatial) % channels;
        let step = scale[ch];
        if step == 0.0 {
            continue;
        }
        *c = if bits == 2 {
            ternary_code(f64::from(v), f64::from(step))
        } else {
            let r = (f64::from(v) / f64::from(step)).round();
            r.clamp(f64::from(lo), f64::from(hi)) as i8
        };
    }
    Ok(QuantizedTensorB {
        shape: x.shape().to_vec(),
        codes,
        scale,
        bits,
    })
}
