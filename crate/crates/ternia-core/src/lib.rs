//! Ternary weight quantization toolkit.
//!
//! The crate is organized around three-level (ternary) weight quantizers that
//! map full-precision tensors onto codes in `{-1, 0, 1}` with a per-row scale.
//! Three operators are provided: the naive rounding operator, a
//! threshold-balanced operator whose step is two thirds of the row extremum,
//! and a mean-squared-error-minimizing operator tuned for bell-shaped weight
//! distributions.
//!
//! Modules:
//!
//! * [`tensor`] — dense row-major `f32` tensors and the layer graph used by
//!   the desk-scale inference/training paths.
//! * [`io`] — model manifests (JSON + raw little-endian blobs) and CSV
//!   datasets.
//! * [`dataset`] — labelled datasets plus deterministic synthetic generators.
//! * [`quant`] — the quantization operators, residual expansions, and
//!   activation quantizers.
//! * [`gauss`] — closed-form and numerical analysis of three-level quantizers
//!   under a Gaussian weight prior, including the optimal-threshold search.
//! * [`ptq`] — post-training rounding optimization (learned up/down rounding
//!   against calibration data).
//! * [`qat`] — quantization-aware training with a straight-through estimator.
//!
//! All randomized entry points take explicit seeds and are deterministic for
//! a fixed seed, including under the thread-pool settings honored by the CLI.

pub mod dataset;
pub mod error;
pub mod gauss;
pub mod io;
pub mod ptq;
pub mod qat;
pub mod quant;
pub mod tensor;

mod linalg;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use quant::{ExpansionStack, Operator, QuantizedTensorB, TernaryTensor};
pub use tensor::{Layer, ModelGraph, Tensor};
