//! Truncated-Gaussian analysis of the symmetric ternary quantizer.
//!
//! A ternary quantizer on support `(-λ, λ)` is described by a dead-zone
//! threshold `a` and a reconstruction level `q`: weights with `|w| < a` map
//! to zero, the rest to `±q`. Under a standard-normal prior truncated to the
//! support, this module provides:
//!
//! * closed-form truncated-variance and conditional-mean formulas, each
//!   cross-checked against adaptive quadrature ([`quad`]);
//! * the expected squared quantization error as a function of `(a, q, λ)`,
//!   by quadrature, by closed form at the optimal level, and by seeded
//!   Monte-Carlo;
//! * brute-force minimization over the threshold ([`argmin_threshold`]);
//! * the simplified stationarity polynomial `2a² + 1 − 5aφ(a) − 3φ(a)²`
//!   whose closed-form root — obtained by treating the density value `φ(a)`
//!   as a free variable — is `a = 5/(7√2)` ([`ANALYTIC_THRESHOLD`]), the
//!   constant behind the mquant step factor. The numeric argmin under the
//!   true Gaussian density lands elsewhere; [`TheoryReport`] quantifies the
//!   gap instead of hiding it.
//!
//! Everything here is `f64` and deterministic; Monte-Carlo takes an explicit
//! seed.

pub mod quad;

use crate::error::{Error, Result};
use quad::integrate;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

/// Closed-form critical threshold `5/(7√2)` of the simplified stationarity
/// system (density treated as a free variable). Also the mquant step factor.
pub const ANALYTIC_THRESHOLD: f64 = 5.0 / (7.0 * SQRT_2);

/// The density value `2√2/7` that makes the simplified stationarity system
/// exact at [`ANALYTIC_THRESHOLD`].
pub const CRITICAL_DENSITY: f64 = 2.0 * SQRT_2 / 7.0;

/// Absolute tolerance for each quadrature panel inside [`expected_error`].
const QUAD_TOL: f64 = 1e-11;

/// Probability mass below which a truncation bin is treated as empty.
const MASS_FLOOR: f64 = 1e-14;

/// Standard normal density `φ(x) = exp(−x²/2)/√(2π)`.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function `Φ(x)`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Density and distribution function together.
pub fn normal_pdf_cdf(x: f64) -> (f64, f64) {
    (normal_pdf(x), normal_cdf(x))
}

/// Probability of the central bin, `P(|w| ≤ a) = 2Φ(a) − 1`, computed as
/// `erf(a/√2)` so small thresholds lose no precision to cancellation.
pub fn central_mass(a: f64) -> f64 {
    libm::erf(a / SQRT_2)
}

/// Probability of one tail bin, `Φ(λ) − Φ(a)`, computed as a difference of
/// complementary error functions so deep tails lose no precision.
pub fn tail_mass(a: f64, lambda: f64) -> f64 {
    0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(lambda / SQRT_2))
}

fn check_interval(a: f64, lambda: f64) -> Result<()> {
    if !a.is_finite() || !lambda.is_finite() || a < 0.0 || a >= lambda {
        return Err(Error::InvalidArgument(format!(
            "threshold/support pair must satisfy 0 <= a < lambda, got a={a}, lambda={lambda}"
        )));
    }
    Ok(())
}

/// Variance of a standard normal truncated to `[-a, a]`:
/// `1 − 2aφ(a)/(2Φ(a) − 1)`.
///
/// Below `a = 1e-4` the direct ratio cancels catastrophically, so the series
/// `a²/3 − 2a⁴/45` takes over; the variance tends to zero with the interval.
pub fn trunc_var_central(a: f64) -> Result<f64> {
    if !a.is_finite() || a < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "central truncation threshold must be non-negative, got {a}"
        )));
    }
    if a < 1e-4 {
        return Ok(a * a / 3.0 - 2.0 * a.powi(4) / 45.0);
    }
    Ok((1.0 - 2.0 * a * normal_pdf(a) / central_mass(a)).max(0.0))
}

/// Variance of a standard normal truncated to `[a, λ]`:
/// `1 + (aφ(a) − λφ(λ))/Z − ((φ(a) − φ(λ))/Z)²` with `Z = Φ(λ) − Φ(a)`.
pub fn trunc_var_tail(a: f64, lambda: f64) -> Result<f64> {
    check_interval(a, lambda)?;
    let z = tail_mass(a, lambda);
    if z < MASS_FLOOR {
        return Err(Error::EmptyMass { lo: a, hi: lambda });
    }
    let (pa, pl) = (normal_pdf(a), normal_pdf(lambda));
    let mean = (pa - pl) / z;
    Ok((1.0 + (a * pa - lambda * pl) / z - mean * mean).max(0.0))
}

/// Error-minimizing reconstruction level for the tail bin: the conditional
/// mean `E[w | a ≤ w ≤ λ] = (φ(a) − φ(λ))/(Φ(λ) − Φ(a))`.
pub fn optimal_level(a: f64, lambda: f64) -> Result<f64> {
    check_interval(a, lambda)?;
    let z = tail_mass(a, lambda);
    if z < MASS_FLOOR {
        return Err(Error::EmptyMass { lo: a, hi: lambda });
    }
    Ok((normal_pdf(a) - normal_pdf(lambda)) / z)
}

/// A ternary quantizer on support `(-λ, λ)`: dead zone `[-a, a]`,
/// reconstruction levels `±q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    /// Dead-zone threshold.
    pub a: f64,
    /// Reconstruction level.
    pub q: f64,
    /// Support bound.
    pub lambda: f64,
}

impl QuantizerParams {
    /// Validate `0 ≤ a < λ` and `q > 0`.
    pub fn new(a: f64, q: f64, lambda: f64) -> Result<Self> {
        check_interval(a, lambda)?;
        if !q.is_finite() || q <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "reconstruction level must be positive, got {q}"
            )));
        }
        Ok(QuantizerParams { a, q, lambda })
    }

    /// Expected squared error of this quantizer under the truncated prior.
    pub fn expected_error(&self) -> Result<f64> {
        expected_error(self.a, self.q, self.lambda)
    }
}

/// Expected squared quantization error under an arbitrary prior density,
/// restricted and renormalized to `[-λ, λ]`:
///
/// `( ∫_{-λ}^{-a}(w+q)²p + ∫_{-a}^{a}w²p + ∫_{a}^{λ}(w−q)²p ) / ∫_{-λ}^{λ}p`
///
/// evaluated by adaptive quadrature. `q = 0` is the degenerate all-zeros
/// quantizer, whose error is the prior's truncated second moment.
pub fn expected_error_for_pdf<F: Fn(f64) -> f64>(
    pdf: F,
    a: f64,
    q: f64,
    lambda: f64,
) -> Result<f64> {
    check_interval(a, lambda)?;
    if !q.is_finite() || q < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "reconstruction level must be non-negative, got {q}"
        )));
    }
    let left = integrate(|w| (w + q) * (w + q) * pdf(w), -lambda, -a, QUAD_TOL);
    let center = integrate(|w| w * w * pdf(w), -a, a, QUAD_TOL);
    let right = integrate(|w| (w - q) * (w - q) * pdf(w), a, lambda, QUAD_TOL);
    let mass = integrate(|w| pdf(w), -lambda, lambda, 1e-12);
    if mass < MASS_FLOOR {
        return Err(Error::EmptyMass {
            lo: -lambda,
            hi: lambda,
        });
    }
    Ok((left + center + right) / mass)
}

/// Expected squared quantization error under the truncated standard-normal
/// prior, by adaptive quadrature (absolute error ≤ 1e-10).
pub fn expected_error(a: f64, q: f64, lambda: f64) -> Result<f64> {
    expected_error_for_pdf(normal_pdf, a, q, lambda)
}

/// Closed form of [`expected_error`] with `q` set to [`optimal_level`]:
/// the mass-weighted combination of the truncated bin variances,
/// `((2Φ(a)−1)·Vc + 2Z·Vt) / (2Φ(λ)−1)`. Used for fast threshold sweeps.
pub fn expected_error_at_optimal_level(a: f64, lambda: f64) -> Result<f64> {
    check_interval(a, lambda)?;
    let z = tail_mass(a, lambda);
    if z < MASS_FLOOR {
        return Err(Error::EmptyMass { lo: a, hi: lambda });
    }
    let vc = trunc_var_central(a)?;
    let vt = trunc_var_tail(a, lambda)?;
    Ok((central_mass(a) * vc + 2.0 * z * vt) / central_mass(lambda))
}

/// The unweighted variance sum `Vc(a) + 2·Vt(a, λ)` — the bin-variance
/// decomposition with the bin masses dropped. Reported alongside the
/// mass-weighted expectation for comparison; the two do not coincide.
pub fn variance_decomposition_error(a: f64, lambda: f64) -> Result<f64> {
    if a <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variance decomposition needs a positive threshold, got {a}"
        )));
    }
    Ok(trunc_var_central(a)? + 2.0 * trunc_var_tail(a, lambda)?)
}

/// Result of minimizing the expected error over the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOptimum {
    /// Minimizing threshold.
    pub a_star: f64,
    /// Optimal reconstruction level at `a_star`.
    pub q_star: f64,
    /// Expected error at the optimum.
    pub error: f64,
}

/// Minimize `a ↦ expected_error(a, optimal_level(a), λ)` by coarse grid
/// search plus golden-section refinement. See [`argmin_threshold_with_step`]
/// for the grid-step knob; the default coarse step is 0.01.
pub fn argmin_threshold(lambda: f64) -> Result<ThresholdOptimum> {
    argmin_threshold_with_step(lambda, 0.01)
}

/// [`argmin_threshold`] with an explicit coarse grid step, exposed so the
/// grid-stability of the optimum can be measured.
pub fn argmin_threshold_with_step(lambda: f64, step: f64) -> Result<ThresholdOptimum> {
    if !lambda.is_finite() || lambda < 0.1 {
        return Err(Error::InvalidArgument(format!(
            "support bound too small to optimize over, got {lambda}"
        )));
    }
    if !step.is_finite() || step <= 0.0 || step > 0.5 {
        return Err(Error::InvalidArgument(format!(
            "grid step must lie in (0, 0.5], got {step}"
        )));
    }
    // The objective is smooth with a single interior minimum well below 6σ
    // for any support bound, so a coarse pass suffices to bracket it.
    let hi = (lambda - 0.01).min(6.0);
    let mut best_a = f64::NAN;
    let mut best_j = f64::INFINITY;
    let mut i = 1u64;
    loop {
        let a = i as f64 * step;
        if a > hi {
            break;
        }
        let j = expected_error_at_optimal_level(a, lambda)?;
        if j < best_j {
            best_j = j;
            best_a = a;
        }
        i += 1;
    }
    if best_a.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "support bound {lambda} leaves no grid point below it"
        )));
    }
    let (mut lo, mut hi) = (
        (best_a - step).max(1e-6),
        (best_a + step).min(lambda - 1e-6),
    );
    // Golden-section refinement to a 1e-10 bracket.
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INVPHI * (hi - lo);
    let mut d = lo + INVPHI * (hi - lo);
    let mut fc = expected_error_at_optimal_level(c, lambda)?;
    let mut fd = expected_error_at_optimal_level(d, lambda)?;
    while hi - lo > 1e-10 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INVPHI * (hi - lo);
            fc = expected_error_at_optimal_level(c, lambda)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INVPHI * (hi - lo);
            fd = expected_error_at_optimal_level(d, lambda)?;
        }
    }
    let a_star = 0.5 * (lo + hi);
    Ok(ThresholdOptimum {
        a_star,
        q_star: optimal_level(a_star, lambda)?,
        error: expected_error_at_optimal_level(a_star, lambda)?,
    })
}

/// Residual of the simplified stationarity polynomial
/// `2a² + 1 − 5aφ(a) − 3φ(a)²` with `φ` the true Gaussian density.
///
/// At [`ANALYTIC_THRESHOLD`] the residual is nonzero (≈ 0.2534): the
/// closed-form root holds only when the density value is treated as a free
/// variable ([`polynomial_residual_with_density`] at [`CRITICAL_DENSITY`]).
pub fn polynomial_residual(a: f64) -> f64 {
    polynomial_residual_with_density(a, normal_pdf(a))
}

/// Residual `2a² + 1 − 5a·d − 3d²` with an explicit density value `d`.
pub fn polynomial_residual_with_density(a: f64, density: f64) -> f64 {
    2.0 * a * a + 1.0 - 5.0 * a * density - 3.0 * density * density
}

/// Solve the stationarity polynomial for the threshold given a density
/// value: `a = ¼(√(49d² − 8) + 5d)` (upper branch).
///
/// The discriminant vanishes exactly at [`CRITICAL_DENSITY`]; tiny negative
/// values from rounding are clamped to zero, anything lower is rejected.
pub fn threshold_from_density(density: f64) -> Result<f64> {
    if !density.is_finite() || density <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "density value must be positive, got {density}"
        )));
    }
    let mut disc = 49.0 * density * density - 8.0;
    if disc < 0.0 {
        if disc > -1e-13 {
            disc = 0.0;
        } else {
            return Err(Error::InvalidArgument(format!(
                "density {density} is below the critical branch (49d² − 8 = {disc})"
            )));
        }
    }
    Ok(0.25 * (disc.sqrt() + 5.0 * density))
}

/// Solve the stationarity polynomial for the density given a threshold:
/// `d = (√(49a² + 12) − 5a)/6`, the positive root.
///
/// This map attains its minimum [`CRITICAL_DENSITY`] exactly at
/// [`ANALYTIC_THRESHOLD`]; for `a` at or above that point it inverts
/// [`threshold_from_density`].
pub fn density_from_threshold(a: f64) -> f64 {
    ((49.0 * a * a + 12.0).sqrt() - 5.0 * a) / 6.0
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    /// Sample mean.
    pub mean: f64,
    /// Standard error of the mean.
    pub stderr: f64,
}

/// Monte-Carlo estimate of [`expected_error`]: rejection-sample the
/// truncated prior, quantize, and average the squared error. Deterministic
/// given the seed; sequential so thread count cannot change the result.
pub fn mc_expected_error(
    a: f64,
    q: f64,
    lambda: f64,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_interval(a, lambda)?;
    if lambda < 0.01 {
        return Err(Error::InvalidArgument(format!(
            "support bound {lambda} accepts too few samples for rejection sampling"
        )));
    }
    if !q.is_finite() || q < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "reconstruction level must be non-negative, got {q}"
        )));
    }
    if samples < 2 {
        return Err(Error::InvalidArgument(
            "at least two samples are needed for a standard error".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for _ in 0..samples {
        let w = loop {
            let x: f64 = rng.sample(StandardNormal);
            if x.abs() < lambda {
                break x;
            }
        };
        let quantized = if w.abs() < a { 0.0 } else { q.copysign(w) };
        let err = (quantized - w) * (quantized - w);
        sum += err;
        sum_sq += err * err;
    }
    let n = samples as f64;
    let mean = sum / n;
    let variance = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        stderr: (variance / n).sqrt(),
    })
}

/// Everything the threshold analysis produces for one support bound, in one
/// serializable record: the numeric optimum, the closed-form constant it is
/// compared against, both error formulas, a Monte-Carlo corroboration, and
/// the stationarity-system diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Support bound the analysis ran at.
    pub lambda: f64,
    /// Numerically minimizing threshold.
    pub a_star_numeric: f64,
    /// Optimal level at the numeric threshold.
    pub q_star_numeric: f64,
    /// Expected error at the numeric optimum (quadrature).
    pub expected_error_at_a_star: f64,
    /// Closed-form threshold `5/(7√2)` from the simplified system.
    pub a_star_analytic: f64,
    /// Optimal level at the closed-form threshold.
    pub q_at_analytic_a: f64,
    /// Expected error at the closed-form threshold (quadrature).
    pub expected_error_at_analytic_a: f64,
    /// `|a_star_numeric − a_star_analytic|`.
    pub threshold_gap: f64,
    /// Unweighted variance sum `Vc + 2Vt` at the closed-form threshold.
    pub variance_decomposition_error: f64,
    /// Stationarity residual at the closed-form threshold under the true
    /// Gaussian density (nonzero by construction).
    pub polynomial_residual_at_analytic_a: f64,
    /// `|threshold_from_density(CRITICAL_DENSITY) − ANALYTIC_THRESHOLD|` —
    /// how exactly the simplified system closes on itself.
    pub consistency_residual: f64,
    /// Central-bin mass `2Φ(a) − 1` at the closed-form threshold with
    /// unbounded support (compare: 1/3 for equal-mass bins).
    pub central_mass_at_analytic_a: f64,
    /// One tail's mass `1 − Φ(a)` at the closed-form threshold, unbounded
    /// support.
    pub tail_mass_at_analytic_a: f64,
    /// Monte-Carlo estimate of the error at the numeric optimum.
    pub mc_error: f64,
    /// Standard error of the Monte-Carlo estimate.
    pub mc_stderr: f64,
    /// Monte-Carlo sample count.
    pub mc_samples: u64,
    /// Monte-Carlo seed.
    pub seed: u64,
}

impl TheoryReport {
    /// Run the full analysis for one support bound.
    pub fn compute(lambda: f64, mc_samples: u64, seed: u64) -> Result<Self> {
        let optimum = argmin_threshold(lambda)?;
        let analytic = ANALYTIC_THRESHOLD;
        let q_analytic = optimal_level(analytic, lambda)?;
        let mc = mc_expected_error(optimum.a_star, optimum.q_star, lambda, mc_samples, seed)?;
        Ok(TheoryReport {
            lambda,
            a_star_numeric: optimum.a_star,
            q_star_numeric: optimum.q_star,
            expected_error_at_a_star: expected_error(optimum.a_star, optimum.q_star, lambda)?,
            a_star_analytic: analytic,
            q_at_analytic_a: q_analytic,
            expected_error_at_analytic_a: expected_error(analytic, q_analytic, lambda)?,
            threshold_gap: (optimum.a_star - analytic).abs(),
            variance_decomposition_error: variance_decomposition_error(analytic, lambda)?,
            polynomial_residual_at_analytic_a: polynomial_residual(analytic),
            consistency_residual: (threshold_from_density(CRITICAL_DENSITY)? - analytic).abs(),
            central_mass_at_analytic_a: central_mass(analytic),
            tail_mass_at_analytic_a: 1.0 - normal_cdf(analytic),
            mc_error: mc.mean,
            mc_stderr: mc.stderr,
            mc_samples,
            seed,
        })
    }
}
