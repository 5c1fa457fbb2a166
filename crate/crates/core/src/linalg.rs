//! Small dense linear-algebra kernels used by the physics modules.
//!
//! Matrix sizes here are modest (≤ a few hundred), so everything is
//! hand-rolled: a cyclic Jacobi eigensolver for real symmetric matrices, an
//! LU solver for small complex systems, and row-major multiply kernels for
//! the moment-equation partial sums. The multiply kernels use the i-k-j loop
//! order so that the inner loop runs over contiguous memory.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, vectors)` with `vectors` holding the eigenvector of
/// `eigenvalues[i]` in column `i`. The vectors are orthonormal to machine
/// precision, including inside degenerate clusters (Jacobi applies exact
/// plane rotations to an orthogonal accumulator).
pub fn eigh(mat: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = mat.nrows();
    if mat.ncols() != n {
        return Err(Error::Dimension(format!(
            "eigh requires a square matrix, got {}x{}",
            n,
            mat.ncols()
        )));
    }
    let mut a = mat.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return Ok((a.diag().to_vec(), v));
    }

    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-15 * scale;

    for _sweep in 0..60 {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
            s.sqrt()
        };
        if off < tol {
            let evals = a.diag().to_vec();
            return Ok((evals, v));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[[p, i]];
                    let aqi = a[[q, i]];
                    a[[p, i]] = c * api - s * aqi;
                    a[[q, i]] = s * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::Singular(
        "Jacobi eigensolver did not converge in 60 sweeps".into(),
    ))
}

/// Solve `A x = b` for a small dense complex system by LU with partial
/// pivoting. `a` is row-major `n`×`n` and is consumed as scratch.
pub fn lu_solve(mut a: Vec<Complex64>, mut b: Vec<Complex64>) -> Result<Vec<Complex64>> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (mut imax, mut vmax) = (col, a[perm[col] * n + col].norm_sqr());
        for (i, &pi) in perm.iter().enumerate().skip(col + 1) {
            let v = a[pi * n + col].norm_sqr();
            if v > vmax {
                imax = i;
                vmax = v;
            }
        }
        if vmax < 1e-300 {
            return Err(Error::Singular(format!("pivot {col} is numerically zero")));
        }
        perm.swap(col, imax);
        let prow = perm[col];
        let pivot = a[prow * n + col];
        for &row in perm.iter().skip(col + 1) {
            let f = a[row * n + col] / pivot;
            a[row * n + col] = f;
            for j in col + 1..n {
                let upper = a[prow * n + j];
                a[row * n + j] -= f * upper;
            }
            let bp = b[prow];
            b[row] -= f * bp;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for col in (0..n).rev() {
        let row = perm[col];
        let mut acc = b[row];
        for j in col + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[col] = acc / a[row * n + col];
    }
    Ok(x)
}

/// Solve `A x = b` for a dense real system by LU with partial pivoting.
pub fn lu_solve_real(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (mut imax, mut vmax) = (col, a[perm[col] * n + col].abs());
        for (i, &pi) in perm.iter().enumerate().skip(col + 1) {
            let v = a[pi * n + col].abs();
            if v > vmax {
                imax = i;
                vmax = v;
            }
        }
        if vmax < 1e-300 {
            return Err(Error::Singular(format!("pivot {col} is numerically zero")));
        }
        perm.swap(col, imax);
        let prow = perm[col];
        let pivot = a[prow * n + col];
        for &row in perm.iter().skip(col + 1) {
            let f = a[row * n + col] / pivot;
            a[row * n + col] = f;
            for j in col + 1..n {
                let upper = a[prow * n + j];
                a[row * n + j] -= f * upper;
            }
            let bp = b[prow];
            b[row] -= f * bp;
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let row = perm[col];
        let mut acc = b[row];
        for j in col + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[col] = acc / a[row * n + col];
    }
    Ok(x)
}

/// `c = a * b` (or `c += a * b` when `accumulate`) for row-major real `a`
/// (m×k) and complex `b` (k×n).
pub fn gemm_rc(
    a: &[f64],
    b: &[Complex64],
    c: &mut [Complex64],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(Complex64::new(0.0, 0.0));
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`) for row-major real
/// matrices, a: m×k, b: k×n.
pub fn gemm_rr(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
