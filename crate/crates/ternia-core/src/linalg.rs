//! Minimal deterministic dense kernels.
//!
//! Every kernel accumulates each output element sequentially in index order,
//! so results are bit-identical regardless of thread count. Parallelism only
//! splits work across disjoint output rows.

use rayon::prelude::*;

/// Rough element-op count above which a matmul is worth parallelizing.
const PAR_THRESHOLD: usize = 1 << 16;

/// `C = A * B^T` where `A: [m, k]`, `B: [n, k]`, both row-major.
///
/// Each output element is a dot product of two contiguous rows, accumulated
/// in ascending index order.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    let work = m * k * n;
    let row_op = |(i, c_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, out) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *out = dot(a_row, b_row);
        }
    };
    if work >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row_op);
    } else {
        c.chunks_mut(n).enumerate().for_each(row_op);
    }
    c
}

/// Sequential dot product in ascending index order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `C = A^T * B` where `A: [m, k]`, `B: [m, n]`, yielding `[k, n]`.
///
/// Used for gradient accumulation (`dW = delta^T X`). The reduction over the
/// `m` axis runs in ascending order for every output element.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0f32; k * n];
    for i in 0..k {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, out) in c_row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for r in 0..m {
                acc += a[r * k + i] * b[r * n + j];
            }
            *out = acc;
        }
    }
    c
}

/// `C = A * B` where `A: [m, k]`, `B: [k, n]`, both row-major.
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, out) in c_row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for r in 0..k {
                acc += a[i * k + r] * b[r * n + j];
            }
            *out = acc;
        }
    }
    c
}
