//! Small dense linear-algebra helpers.
//!
//! Every system in this crate is tiny (basis-gram, covariate-gram, and
//! sandwich matrices, at most a few dozen rows), so plain textbook
//! factorizations are plenty and keep the arithmetic deterministic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{ExtremileError, Result};

/// Solve `a x = b` for symmetric positive definite `a` by Cholesky.
///
/// On failure reports the pivot index where the factorization broke, which
/// names the offending direction for gram matrices whose columns mirror the
/// input columns.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>, context: &str) -> Result<Array1<f64>> {
    let chol = cholesky(a, context)?;
    Ok(chol_solve(&chol, b))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>, context: &str) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ExtremileError::Dimension(format!(
            "{context}: matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        // Relative tolerance keeps the check scale-free.
        let scale = a[[j, j]].abs().max(1.0);
        if !(diag > scale * 1e-12) || !diag.is_finite() {
            return Err(ExtremileError::Singular(format!(
                "{context}: not positive definite at pivot {j} (column index {j})"
            )));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solve using a precomputed lower Cholesky factor.
pub fn chol_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[[i, k]] * v;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = y[k];
            y[i] -= l[[k, i]] * v;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
#[cfg_attr(not(test), allow(dead_code))]
pub fn spd_inverse(a: ArrayView2<f64>, context: &str) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a, context)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = chol_solve(&l, e.view());
        inv.column_mut(j).assign(&col);
    }
    // Symmetrize to wash out the tiny column-wise asymmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
#[cfg_attr(not(test), allow(dead_code))]
pub fn symmetric_eigenvalues(a: ArrayView2<f64>, context: &str) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ExtremileError::Dimension(format!(
            "{context}: matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = a.to_owned();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale: f64 = (0..n).map(|i| m[[i, i]].abs()).fold(1e-300, f64::max);
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    eig.sort_unstable_by(f64::total_cmp);
    Ok(eig)
}

/// Ordinary least squares `argmin |y - x b|^2` through the normal equations.
pub fn ols(x: ArrayView2<f64>, y: ArrayView1<f64>, context: &str) -> Result<Array1<f64>> {
    let xtx = x.t().dot(&x);
    let xty = x.t().dot(&y);
    solve_spd(xtx.view(), xty.view(), context)
}
