//! Small dense helpers: symmetric eigendecomposition, Hermitian checks and a
//! scaling-and-squaring matrix exponential for the low-dimensional generators
//! that appear in the propagators.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex64;

pub fn max_abs(a: &Array2<Complex64>) -> f64 {
    a.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

pub fn max_abs_real(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// max |A - A†| / max(|A|, 1e-300).
pub fn hermitian_residual(a: &Array2<Complex64>) -> f64 {
    let scale = max_abs(a).max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst / scale
}

/// max |A - Aᵀ| / max(|A|, 1e-300).
pub fn symmetric_residual(a: &Array2<Complex64>) -> f64 {
    let scale = max_abs(a).max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).norm());
        }
    }
    worst / scale
}

/// Eigendecomposition of a real symmetric matrix. Returns `(values, vectors)`
/// with eigenvectors as columns, so `A = V diag(λ) Vᵀ`.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen requires a square matrix");
    let m = DMatrix::from_fn(n, n, |i, j| a[(i, j)]);
    let eig = m.symmetric_eigen();
    let values = Array1::from_iter(eig.eigenvalues.iter().copied());
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, j)]);
    (values, vectors)
}

pub fn sym_min_eig(a: &Array2<f64>) -> f64 {
    let (values, _) = sym_eigen(a);
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Minimum eigenvalue of a complex Hermitian matrix, computed on the real
/// embedding `[[X, -Y], [Y, X]]` whose spectrum doubles that of `X + iY`.
pub fn hermitian_min_eig(a: &Array2<Complex64>) -> f64 {
    let n = a.nrows();
    let mut emb = Array2::<f64>::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            let z = a[(i, j)];
            emb[(i, j)] = z.re;
            emb[(i + n, j + n)] = z.re;
            emb[(i, j + n)] = -z.im;
            emb[(i + n, j)] = z.im;
        }
    }
    sym_min_eig(&emb)
}

/// Cholesky factor (lower triangular) of a real symmetric positive-definite
/// matrix, or `None` when the matrix is not numerically positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| a[(i, j)]);
    let chol = m.cholesky()?;
    let l = chol.unpack();
    Some(Array2::from_shape_fn((n, n), |(i, j)| l[(i, j)]))
}

const PADE_COEFFS: [f64; 14] = [
    1.0,
    0.5,
    0.12,
    1.833_333_333_333_333_4e-2,
    1.992_753_623_188_405_8e-3,
    1.630_434_782_608_696e-4,
    1.035_196_687_370_6e-5,
    5.175_983_436_853e-7,
    2.043_151_356_652_5e-8,
    6.306_022_705_717_595e-10,
    1.483_770_048_404_14e-11,
    2.529_153_491_597_966e-13,
    2.810_170_546_219_962_4e-15,
    1.544_049_750_670_309e-17,
];

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// exp(A) via scaling-and-squaring with a Padé(13) approximant. Intended for
/// the small generators of the time steppers, not for large matrices.
pub fn expm(a: &Array2<Complex64>) -> Array2<Complex64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    if n == 1 {
        let mut out = Array2::zeros((1, 1));
        out[(0, 0)] = a[(0, 0)].exp();
        return out;
    }

    // 1-norm controls the scaling exponent (theta_13 = 5.37).
    let mut norm = 0.0f64;
    for j in 0..n {
        let col: f64 = (0..n).map(|i| a[(i, j)].norm()).sum();
        norm = norm.max(col);
    }
    let theta_13 = 5.37;
    let squarings = if norm > theta_13 {
        (norm / theta_13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.mapv(|z| z / (1u64 << squarings) as f64);

    let eye = Array2::from_diag(&Array1::from_elem(n, c(1.0)));
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * c(PADE_COEFFS[13]) + &a4 * c(PADE_COEFFS[11]) + &a2 * c(PADE_COEFFS[9]);
    let w2 = w1.dot(&a6)
        + &a6 * c(PADE_COEFFS[7])
        + &a4 * c(PADE_COEFFS[5])
        + &a2 * c(PADE_COEFFS[3])
        + &eye * c(PADE_COEFFS[1]);
    let u = scaled.dot(&w2);

    let v1 = &a6 * c(PADE_COEFFS[12]) + &a4 * c(PADE_COEFFS[10]) + &a2 * c(PADE_COEFFS[8]);
    let v = v1.dot(&a6)
        + &a6 * c(PADE_COEFFS[6])
        + &a4 * c(PADE_COEFFS[4])
        + &a2 * c(PADE_COEFFS[2])
        + &eye * c(PADE_COEFFS[0]);

    let mut out = solve(&(&v - &u), &(&v + &u));
    for _ in 0..squarings {
        out = out.dot(&out);
    }
    out
}

/// Solve A X = B by Gaussian elimination with partial pivoting.
fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut lhs = a.clone();
    let mut rhs = b.clone();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_mag = lhs[(col, col)].norm();
        for row in col + 1..n {
            let mag = lhs[(row, col)].norm();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = row;
            }
        }
        if pivot_row != col {
            for j in 0..n {
                lhs.swap((col, j), (pivot_row, j));
            }
            for j in 0..m {
                rhs.swap((col, j), (pivot_row, j));
            }
        }
        let pivot = lhs[(col, col)];
        for row in col + 1..n {
            let factor = lhs[(row, col)] / pivot;
            for j in col..n {
                let v = lhs[(col, j)];
                lhs[(row, j)] -= factor * v;
            }
            for j in 0..m {
                let v = rhs[(col, j)];
                rhs[(row, j)] -= factor * v;
            }
        }
    }

    let mut x = Array2::<Complex64>::zeros((n, m));
    for col in (0..n).rev() {
        for j in 0..m {
            let mut sum = rhs[(col, j)];
            for k in col + 1..n {
                sum -= lhs[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = sum / lhs[(col, col)];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expm_zero_is_identity() {
        let z = Array2::<Complex64>::zeros((3, 3));
        let e = expm(&z);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((e[(i, j)] - c(want)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn expm_diagonal() {
        let a = array![
            [Complex64::new(0.3, -1.1), c(0.0)],
            [c(0.0), Complex64::new(-2.0, 0.4)]
        ];
        let e = expm(&a);
        assert!((e[(0, 0)] - Complex64::new(0.3, -1.1).exp()).norm() < 1e-13);
        assert!((e[(1, 1)] - Complex64::new(-2.0, 0.4).exp()).norm() < 1e-13);
        assert!(e[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn expm_pauli_rotation() {
        // exp(-i θ σ_x) = cos θ I - i sin θ σ_x
        let theta = 0.7;
        let a = array![
            [c(0.0), Complex64::new(0.0, -theta)],
            [Complex64::new(0.0, -theta), c(0.0)]
        ];
        let e = expm(&a);
        assert!((e[(0, 0)] - c(theta.cos())).norm() < 1e-13);
        assert!((e[(0, 1)] - Complex64::new(0.0, -theta.sin())).norm() < 1e-13);
    }

    #[test]
    fn expm_unitary_for_antihermitian_large_norm() {
        // Needs several squarings; exp(iH) must stay unitary.
        let h = array![
            [c(40.0), Complex64::new(3.0, 2.0)],
            [Complex64::new(3.0, -2.0), c(-11.0)]
        ];
        let a = h.mapv(|z| z * Complex64::new(0.0, 1.0));
        let u = expm(&a);
        let udag = Array2::from_shape_fn((2, 2), |(i, j)| u[(j, i)].conj());
        let p = u.dot(&udag);
        assert!((p[(0, 0)] - c(1.0)).norm() < 1e-10);
        assert!((p[(1, 1)] - c(1.0)).norm() < 1e-10);
        assert!(p[(0, 1)].norm() < 1e-10);
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let a = array![[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]];
        let (vals, vecs) = sym_eigen(&a);
        let lambda = Array2::from_diag(&vals);
        let back = vecs.dot(&lambda).dot(&vecs.t());
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hermitian_min_eig_matches_real_case() {
        let a = array![
            [c(1.0), Complex64::new(0.0, -0.5)],
            [Complex64::new(0.0, 0.5), c(1.0)]
        ];
        // Eigenvalues of [[1, -i/2],[i/2, 1]] are 0.5 and 1.5.
        assert!((hermitian_min_eig(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        for i in 0..2 {
            for j in 0..2 {
                assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
        let not_pd = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&not_pd).is_none());
    }
}
