//! Newton-Schulz orthogonalization: an odd quintic matrix polynomial that
//! drives the singular values of a Frobenius-normalized matrix toward 1,
//! approximating the polar factor U·Vᵀ without an SVD.

use crate::tensor::kernels::{gemm_rowmajor, Element};

/// Per-step (a, b, c) coefficients for `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
///
/// The table is pluggable so alternative per-step schedules can be swapped
/// in. The default 7-step schedule opens with five passes of the aggressive
/// tuned quintic (steep at 0, oscillates in roughly [0.68, 1.20]) and
/// finishes with two passes of the contractive quintic `(15x - 10x³ + 3x⁵)/8`,
/// whose triple root at 1 pulls every singular value into [0.995, 1.0005].
/// The uniform aggressive schedule alone leaves values as low as 0.68.
#[derive(Debug, Clone, PartialEq)]
pub struct NsCoefficients {
    pub steps: Vec<(f64, f64, f64)>,
}

/// Steep-at-zero quintic used for the transit steps.
pub const NS_AGGRESSIVE: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
/// Contractive quintic with p(1) = 1, p'(1) = p''(1) = 0.
pub const NS_CONTRACTIVE: (f64, f64, f64) = (1.875, -1.25, 0.375);

impl Default for NsCoefficients {
    fn default() -> Self {
        let mut steps = vec![NS_AGGRESSIVE; 5];
        steps.extend([NS_CONTRACTIVE; 2]);
        NsCoefficients { steps }
    }
}

impl NsCoefficients {
    pub fn repeated(a: f64, b: f64, c: f64, steps: usize) -> Self {
        NsCoefficients { steps: vec![(a, b, c); steps] }
    }

    /// The scalar map applied to each singular value by one full pass.
    /// Exact for diagonalizable inputs; used as the oracle for the
    /// identity-input test.
    pub fn scalar_iterate(&self, sigma0: f64) -> f64 {
        let mut x = sigma0;
        for &(a, b, c) in &self.steps {
            x = a * x + b * x.powi(3) + c * x.powi(5);
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct NsResult<E> {
    pub matrix: Vec<E>,
    /// Input was all-zero and is returned unchanged.
    pub was_zero: bool,
}

/// Orthogonalizes a rows×cols matrix (row-major).
///
/// The input is Frobenius-normalized first, so the result is invariant to
/// positive rescaling of the input. Wide orientation is iterated directly;
/// tall matrices are transposed so the Gram product stays small.
pub fn ns_orthogonalize<E: Element>(
    m: &[E],
    rows: usize,
    cols: usize,
    coeffs: &NsCoefficients,
) -> NsResult<E> {
    debug_assert_eq!(m.len(), rows * cols);
    let fro = m.iter().fold(E::zero(), |s, &x| s + x * x).sqrt();
    if fro == E::zero() {
        return NsResult { matrix: m.to_vec(), was_zero: true };
    }
    let transposed = rows > cols;
    let (r, c) = if transposed { (cols, rows) } else { (rows, cols) };
    let mut x = vec![E::zero(); rows * cols];
    if transposed {
        for i in 0..rows {
            for j in 0..cols {
                x[j * rows + i] = m[i * cols + j] / fro;
            }
        }
    } else {
        for (o, &v) in x.iter_mut().zip(m) {
            *o = v / fro;
        }
    }

    let mut gram = vec![E::zero(); r * r];
    let mut gram2 = vec![E::zero(); r * r];
    let mut poly = vec![E::zero(); r * r];
    let mut next = vec![E::zero(); r * c];
    for &(a, b, c_coef) in &coeffs.steps {
        // A = X·Xᵀ
        E::gemm(
            r, c, r,
            E::one(),
            &x, c as isize, 1,
            &x, 1, c as isize,
            E::zero(),
            &mut gram, r as isize, 1,
        );
        gemm_rowmajor(r, r, r, &gram, &gram, &mut gram2, false);
        let (be, ce) = (E::from_f64(b), E::from_f64(c_coef));
        for i in 0..r * r {
            poly[i] = be * gram[i] + ce * gram2[i];
        }
        // X ← aX + (bA + cA²)·X
        let ae = E::from_f64(a);
        for i in 0..r * c {
            next[i] = ae * x[i];
        }
        E::gemm(
            r, r, c,
            E::one(),
            &poly, r as isize, 1,
            &x, c as isize, 1,
            E::one(),
            &mut next, c as isize, 1,
        );
        std::mem::swap(&mut x, &mut next);
    }

    if transposed {
        let mut out = vec![E::zero(); rows * cols];
        for i in 0..r {
            for j in 0..c {
                out[j * cols + i] = x[i * c + j];
            }
        }
        NsResult { matrix: out, was_zero: false }
    } else {
        NsResult { matrix: x, was_zero: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frobenius(m: &[f64]) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_matrix_flagged_and_unchanged() {
        let m = vec![0.0f64; 12];
        let r = ns_orthogonalize(&m, 3, 4, &NsCoefficients::default());
        assert!(r.was_zero);
        assert_eq!(r.matrix, m);
    }

    #[test]
    fn identity_matches_scalar_iteration_oracle() {
        // I_n has all singular values 1/sqrt(n) after Frobenius normalization;
        // the output must be that scalar trajectory times the identity.
        let coeffs = NsCoefficients::default();
        for n in [2usize, 5, 16] {
            let mut m = vec![0.0f64; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            let expected = coeffs.scalar_iterate(1.0 / (n as f64).sqrt());
            let out = ns_orthogonalize(&m, n, n, &coeffs).matrix;
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { expected } else { 0.0 };
                    assert!(
                        (out[i * n + j] - want).abs() < 1e-9,
                        "n={n} ({i},{j}): {} vs {want}",
                        out[i * n + j]
                    );
                }
            }
        }
    }

    #[test]
    fn positive_scaling_is_cancelled() {
        let m: Vec<f64> = (0..20).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let scaled: Vec<f64> = m.iter().map(|v| v * 137.0).collect();
        let a = ns_orthogonalize(&m, 4, 5, &NsCoefficients::default()).matrix;
        let b = ns_orthogonalize(&scaled, 4, 5, &NsCoefficients::default()).matrix;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tall_and_wide_orientations_are_transposes() {
        let m: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let wide = ns_orthogonalize(&m, 4, 6, &NsCoefficients::default()).matrix;
        let mt: Vec<f64> = {
            let mut t = vec![0.0; 24];
            for i in 0..4 {
                for j in 0..6 {
                    t[j * 4 + i] = m[i * 6 + j];
                }
            }
            t
        };
        let tall = ns_orthogonalize(&mt, 6, 4, &NsCoefficients::default()).matrix;
        for i in 0..4 {
            for j in 0..6 {
                assert!((wide[i * 6 + j] - tall[j * 4 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_rows_near_orthonormal_for_random_square() {
        let m: Vec<f64> = (0..64).map(|i| ((i * 31 + 7) % 17) as f64 / 17.0 - 0.5).collect();
        let out = ns_orthogonalize(&m, 8, 8, &NsCoefficients::default()).matrix;
        // X·Xᵀ should be close to I (singular values in the tuned band)
        let mut gram = vec![0.0f64; 64];
        gemm_rowmajor(8, 8, 8, &out, &{
            let mut t = vec![0.0; 64];
            for i in 0..8 {
                for j in 0..8 {
                    t[j * 8 + i] = out[i * 8 + j];
                }
            }
            t
        }, &mut gram, false);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[i * 8 + j] - want).abs() < 0.6,
                    "gram ({i},{j}) = {}",
                    gram[i * 8 + j]
                );
            }
        }
        let f = frobenius(&out);
        assert!(f > 1.5 && f < 4.0, "frobenius {f} out of band for 8x8");
    }
}
