//! Scalar abstraction and raw compute kernels shared by the op set.

use num_traits::Float;
use std::fmt;

/// Scalar type usable inside tensors: f32 for training, f64 for
/// verification (gradient checks, exact-equivalence tests).
pub trait Element: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C ← α·A·B + β·C with explicit row/col strides per operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

pub fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Row-major C = A·B, optionally accumulating into C.
pub fn gemm_rowmajor<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    c: &mut [E],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { E::one() } else { E::zero() };
    E::gemm(
        m, k, n,
        E::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        beta,
        c, n as isize, 1,
    );
}

/// C += A·B with caller-specified strides (used for the transposed products
/// in matmul's backward rule without materializing transposes).
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<E: Element>(
    m: usize, k: usize, n: usize,
    a: &[E], rsa: isize, csa: isize,
    b: &[E], rsb: isize, csb: isize,
    c: &mut [E], rsc: isize, csc: isize,
) {
    E::gemm(m, k, n, E::one(), a, rsa, csa, b, rsb, csb, E::one(), c, rsc, csc);
}

/// NumPy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ad == bd {
            out[i] = ad;
        } else if ad == 1 {
            out[i] = bd;
        } else if bd == 1 {
            out[i] = ad;
        } else {
            return None;
        }
    }
    Some(out)
}

fn padded_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    // stride 0 marks broadcast axes
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut acc = 1usize;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[offset + i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Visits every output element of a broadcast binary op, passing flat
/// indices into the output and both operands.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    // fast paths: identical shapes, and scalar operands
    let a_n: usize = a_shape.iter().product();
    let b_n: usize = b_shape.iter().product();
    if a_shape == b_shape {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    if a_n == 1 {
        for i in 0..total {
            f(i, 0, i);
        }
        return;
    }
    if b_n == 1 {
        for i in 0..total {
            f(i, i, 0);
        }
        return;
    }
    // trailing-suffix broadcast, e.g. (d,) against (T,d)
    if out_shape.ends_with(a_shape) && a_shape.iter().all(|&d| d > 1) && out_shape == b_shape {
        for i in 0..total {
            f(i, i % a_n, i);
        }
        return;
    }
    if out_shape.ends_with(b_shape) && b_shape.iter().all(|&d| d > 1) && out_shape == a_shape {
        for i in 0..total {
            f(i, i, i % b_n);
        }
        return;
    }
    // generic odometer walk
    let rank = out_shape.len();
    let sa = padded_strides(a_shape, rank);
    let sb = padded_strides(b_shape, rank);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        f(oi, ai, bi);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ai += sa[axis];
            bi += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            ai -= sa[axis] * out_shape[axis];
            bi -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Sum (or mean) over all elements or one kept-as-1 axis.
/// Returns `(output_shape, output_data)`, or `None` for a bad axis.
pub fn reduce<E: Element>(
    shape: &[usize],
    data: &[E],
    axis: Option<usize>,
    mean: bool,
) -> Option<(Vec<usize>, Vec<E>)> {
    match axis {
        None => {
            let s = data.iter().fold(E::zero(), |acc, &x| acc + x);
            let v = if mean { s / E::from_f64(data.len() as f64) } else { s };
            Some((vec![], vec![v]))
        }
        Some(ax) => {
            if ax >= shape.len() {
                return None;
            }
            let lead: usize = shape[..ax].iter().product();
            let mid = shape[ax];
            let trail: usize = shape[ax + 1..].iter().product();
            let mut out = vec![E::zero(); lead * trail];
            for l in 0..lead {
                for m in 0..mid {
                    let base = (l * mid + m) * trail;
                    for t in 0..trail {
                        out[l * trail + t] = out[l * trail + t] + data[base + t];
                    }
                }
            }
            if mean {
                let inv = E::one() / E::from_f64(mid as f64);
                for v in out.iter_mut() {
                    *v = *v * inv;
                }
            }
            let mut osh = shape.to_vec();
            osh[ax] = 1;
            Some((osh, out))
        }
    }
}

/// Backward of [`reduce`]: spreads the (scaled) output gradient back over
/// the reduced axis of the input shape.
pub fn spread_reduction<E: Element>(
    in_shape: &[usize],
    og: &[E],
    axis: Option<usize>,
    factor: E,
) -> Vec<E> {
    let n: usize = in_shape.iter().product();
    match axis {
        None => vec![og[0] * factor; n],
        Some(ax) => {
            let lead: usize = in_shape[..ax].iter().product();
            let mid = in_shape[ax];
            let trail: usize = in_shape[ax + 1..].iter().product();
            let mut g = vec![E::zero(); n];
            for l in 0..lead {
                for m in 0..mid {
                    let base = (l * mid + m) * trail;
                    for t in 0..trail {
                        g[base + t] = og[l * trail + t] * factor;
                    }
                }
            }
            g
        }
    }
}
