//! Adaptive Gauss–Kronrod quadrature (7/15 pair).
//!
//! The embedded 7-point Gauss rule prices the 15-point Kronrod estimate: when
//! the two disagree by more than the tolerance the interval is bisected, with
//! half the tolerance budget per half. For the smooth integrands used here
//! (Gaussian moments) the Kronrod estimate is far more accurate than the
//! disagreement suggests, so `|K15 - G7| <= tol` is a conservative acceptance
//! test.

/// Nodes of the 15-point Kronrod rule on `[-1, 1]` (non-negative half; the
/// rule is symmetric). Odd indices plus the center are the 7 Gauss nodes.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];

/// Kronrod weights paired with `XGK`.
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

/// Gauss weights for nodes `XGK[1], XGK[3], XGK[5]` and the center.
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

const MAX_DEPTH: u32 = 60;
const MIN_TOL: f64 = 1e-15;

/// One 7/15 evaluation over `[lo, hi]`: returns the Kronrod estimate and the
/// absolute disagreement with the embedded Gauss rule.
fn g7k15(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let f_center = f(center);
    let mut kronrod = WGK[7] * f_center;
    let mut gauss = WG[3] * f_center;
    for (i, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let pair = f(center - half * x) + f(center + half * x);
        kronrod += wk * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    kronrod *= half;
    gauss *= half;
    (kronrod, (kronrod - gauss).abs())
}

fn adaptive(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
    let (estimate, disagreement) = g7k15(f, lo, hi);
    if disagreement <= tol || depth >= MAX_DEPTH {
        return estimate;
    }
    let mid = 0.5 * (lo + hi);
    let half_tol = 0.5 * tol;
    adaptive(f, lo, mid, half_tol, depth + 1) + adaptive(f, mid, hi, half_tol, depth + 1)
}

/// Integrate `f` over `[lo, hi]` to absolute tolerance `tol`.
///
/// Orientation follows the bounds: `lo > hi` yields the negated integral.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    if lo == hi {
        return 0.0;
    }
    if lo > hi {
        return -adaptive(&f, hi, lo, tol.max(MIN_TOL), 0);
    }
    adaptive(&f, lo, hi, tol.max(MIN_TOL), 0)
}
