//! Shared helpers for the criterion benchmarks.

use ternia_core::tensor::Tensor;

/// Deterministic pseudo-random weight matrix for benchmarking, built from a
/// simple congruential sequence so the benches need no RNG dependency here.
pub fn bench_weights(rows: usize, cols: usize) -> Tensor {
    let mut state = 0x2545F4914F6CDD1Du64;
    let data = (0..rows * cols)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 32) as u32 as i32 as f32) / (i32::MAX as f32)
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("valid shape")
}
