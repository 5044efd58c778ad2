//! Sandwich covariance for the fitted coefficient matrix and the derived
//! extremile coefficients.
//!
//! The coefficient vector `Vec(alpha)` is asymptotically normal with
//! covariance `H^{-1} Sigma H^{-1} / n`, where
//!
//! - `H = n^{-1} sum_i int {x_i' alpha db(t)}^{-1} (b(t) (x) x_i)(b(t) (x) x_i)' dt`
//!   is the curvature of the integrated check loss (the quantile-slope
//!   `x_i' alpha db(t)` plays the role of an inverse conditional density), and
//! - `Sigma = n^{-1} sum_i S_i S_i'` is the second moment of the
//!   per-observation scores `S_i = int (b (x) x_i) { I(y_i < x_i' alpha b(t)) - t } dt`.
//!
//! Semi-supervised fits replace `Sigma` with a projected version that
//! accounts for the estimated weights; see [`sigma_rho_hat`]. The extremile
//! coefficient `beta_tau = alpha m(tau)` is the linear image of `Vec(alpha)`
//! under `btilde = m(tau) (x) I_p`, so its covariance is
//! `btilde' H^{-1} Sigma H^{-1} btilde / n`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::basis::{basis_moment, BasisSpec};
use crate::error::{ExtremileError, Result};
use crate::estimators::{ExtremileFit, FitMode, LabeledData, UnlabeledData, ZMap};
use crate::linalg;
use crate::qrcm::CoefMatrix;
use crate::quad::{GridSpec, IntegrationRule};

/// The two halves of the sandwich, plus bookkeeping.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    /// Curvature matrix `H`, `pq x pq`.
    pub h_hat: Array2<f64>,
    /// Score second moment (`Sigma` or its semi-supervised version).
    pub sigma: Array2<f64>,
    /// True when `sigma` is the semi-supervised correction.
    pub semi_supervised: bool,
    /// Number of (observation, node) slopes raised to the floor in `H`.
    pub floored: usize,
    /// Labeled sample size the averages were taken over.
    pub n: usize,
}

/// Covariance of one extremile coefficient vector.
#[derive(Debug, Clone)]
pub struct BetaCovariance {
    pub tau: f64,
    /// `p x p` covariance of `beta_tau`.
    pub cov: Array2<f64>,
    /// Standard errors, the square roots of the diagonal.
    pub se: Array1<f64>,
}

fn population_sd(y: ArrayView1<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Curvature matrix `H` with the quantile slope floored at `eps` (default
/// `1e-3 * sd(y)`) so near-crossing or non-monotone fitted quantiles cannot
/// blow up the integrand. Returns `(H, floored)` where `floored` counts the
/// (observation, node) pairs that hit the floor.
pub fn hessian_hat(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    rule: &IntegrationRule,
    eps: Option<f64>,
) -> Result<(Array2<f64>, usize)> {
    let n = x.nrows();
    let p = x.ncols();
    let q = basis.len();
    if n == 0 {
        return Err(ExtremileError::Empty("curvature matrix of an empty sample".into()));
    }
    if alpha.p() != p || alpha.q() != q {
        return Err(ExtremileError::Dimension(format!(
            "coefficient matrix is {}x{}, expected {p}x{q}",
            alpha.p(),
            alpha.q()
        )));
    }
    let eps = match eps {
        Some(e) => {
            if !(e > 0.0) || !e.is_finite() {
                return Err(ExtremileError::Domain(format!("slope floor must be positive, got {e}")));
            }
            e
        }
        None => {
            let sd = population_sd(y);
            1e-3 * if sd > 0.0 { sd } else { 1.0 }
        }
    };

    let (bmat, working) = basis.eval_on(rule)?;
    let g = working.len();
    let mut dmat = Array2::zeros((g, q));
    {
        let mut buf = vec![0.0; q];
        for (gi, &t) in working.nodes().iter().enumerate() {
            basis.deriv_into(t, &mut buf);
            for k in 0..q {
                dmat[[gi, k]] = buf[k];
            }
        }
    }
    if dmat.iter().any(|v| !v.is_finite()) {
        return Err(ExtremileError::NonFinite("basis derivative is non-finite on the grid".into()));
    }

    // slopes[i, g] = x_i' alpha db(t_g).
    let slopes = x.dot(&alpha.array().dot(&dmat.t()));
    let mut floored = 0usize;
    let mut h = Array2::zeros((p * q, p * q));
    let weights = working.weights();
    let mut v = Array1::zeros(n);
    let mut xv = Array2::zeros((n, p));
    for gi in 0..g {
        for i in 0..n {
            let s = slopes[[i, gi]];
            let s = if s < eps {
                floored += 1;
                eps
            } else {
                s
            };
            v[i] = weights[gi] / s;
        }
        // a = x' diag(v) x, the covariate block at this node.
        xv.assign(&x);
        for (mut row, &vi) in xv.rows_mut().into_iter().zip(v.iter()) {
            row *= vi;
        }
        let a = x.t().dot(&xv);
        // kron(b_g b_g', a) accumulated into the (k1, k2) blocks.
        for k1 in 0..q {
            for k2 in 0..q {
                let scale = bmat[[gi, k1]] * bmat[[gi, k2]];
                if scale == 0.0 {
                    continue;
                }
                for j1 in 0..p {
                    for j2 in 0..p {
                        h[[k1 * p + j1, k2 * p + j2]] += scale * a[[j1, j2]];
                    }
                }
            }
        }
    }
    h /= n as f64;
    // The accumulation is symmetric up to rounding; make it exact.
    let ht = h.t().to_owned();
    h += &ht;
    h /= 2.0;
    Ok((h, floored))
}

/// Per-observation scores `S_i`, one row per observation, using the hard
/// indicator (no smoothing). Row layout matches `Vec(alpha)`:
/// entry `k * p + j` multiplies `b_k(t) x_{ij}`.
pub fn score_contributions(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    rule: &IntegrationRule,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    let q = basis.len();
    if n == 0 || y.len() != n {
        return Err(ExtremileError::Dimension(format!(
            "scores need matching rows, got {} and {}",
            n,
            y.len()
        )));
    }
    if alpha.p() != p || alpha.q() != q {
        return Err(ExtremileError::Dimension(format!(
            "coefficient matrix is {}x{}, expected {p}x{q}",
            alpha.p(),
            alpha.q()
        )));
    }
    let (bmat, working) = basis.eval_on(rule)?;
    let g = working.len();
    let coords = x.dot(alpha.array());
    let fitted = coords.dot(&bmat.t());
    // psi0[i, g] = w_g (I(y_i < q_i(t_g)) - t_g).
    let mut psi0 = Array2::zeros((n, g));
    for i in 0..n {
        for gi in 0..g {
            let ind = if y[i] - fitted[[i, gi]] < 0.0 { 1.0 } else { 0.0 };
            psi0[[i, gi]] = working.weights()[gi] * (ind - working.nodes()[gi]);
        }
    }
    let m = psi0.dot(&bmat);
    let mut s = Array2::zeros((n, p * q));
    for i in 0..n {
        for k in 0..q {
            for j in 0..p {
                s[[i, k * p + j]] = x[[i, j]] * m[[i, k]];
            }
        }
    }
    Ok(s)
}

/// Score second moment `Sigma = n^{-1} sum_i S_i S_i'`.
pub fn sigma_hat(scores: ArrayView2<f64>) -> Array2<f64> {
    let n = scores.nrows().max(1) as f64;
    let mut sigma = scores.t().dot(&scores);
    sigma /= n;
    sigma
}

/// Semi-supervised score second moment.
///
/// With `A = (sum z_i z_i')^{-1} sum z_i S_i'` (labeled sums) and
/// `c = N / (n + N)`, the adjusted contributions are
/// `W_i = S_i - c A' z_i` on the labeled rows and `V_u = c A' z_u` on the
/// unlabeled rows, giving
/// `Sigma_rho = n^{-1} sum W_i W_i' + N^{-1} sum V_u V_u'`.
/// An empty pool returns [`sigma_hat`] unchanged.
pub fn sigma_rho_hat(
    scores: ArrayView2<f64>,
    z_labeled: ArrayView2<f64>,
    z_unlabeled: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = scores.nrows();
    let big_n = z_unlabeled.nrows();
    if big_n == 0 {
        return Ok(sigma_hat(scores));
    }
    if z_labeled.nrows() != n {
        return Err(ExtremileError::Dimension(format!(
            "scores have {n} rows but labeled features have {}",
            z_labeled.nrows()
        )));
    }
    if z_labeled.ncols() != z_unlabeled.ncols() {
        return Err(ExtremileError::Dimension(format!(
            "labeled features have {} columns, unlabeled have {}",
            z_labeled.ncols(),
            z_unlabeled.ncols()
        )));
    }
    let gram = z_labeled.t().dot(&z_labeled);
    let chol = linalg::cholesky(gram.view(), "labeled feature gram matrix (deficient z direction)")?;
    let zts = z_labeled.t().dot(&scores);
    let mut a = Array2::zeros(zts.raw_dim());
    for (c, col) in zts.columns().into_iter().enumerate() {
        a.column_mut(c).assign(&linalg::chol_solve(&chol, col));
    }
    let c = big_n as f64 / (n + big_n) as f64;
    let mut w = scores.to_owned();
    w -= &(z_labeled.dot(&a) * c);
    let vu = z_unlabeled.dot(&a) * c;
    let mut sigma = w.t().dot(&w) / n as f64;
    sigma += &(vu.t().dot(&vu) / big_n as f64);
    let st = sigma.t().to_owned();
    sigma += &st;
    sigma /= 2.0;
    Ok(sigma)
}

/// Assemble the sandwich for a supervised fit.
pub fn sandwich_supervised(
    data: &LabeledData,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    grid: GridSpec,
) -> Result<SandwichParts> {
    let rule = IntegrationRule::from_spec(grid)?;
    let (h_hat, floored) = hessian_hat(data.x(), data.y(), alpha, basis, &rule, None)?;
    let scores = score_contributions(data.x(), data.y(), alpha, basis, &rule)?;
    Ok(SandwichParts {
        h_hat,
        sigma: sigma_hat(scores.view()),
        semi_supervised: false,
        floored,
        n: data.n(),
    })
}

/// Assemble the sandwich for a semi-supervised fit. `zmap` must be the map
/// used when fitting.
pub fn sandwich_semisupervised(
    labeled: &LabeledData,
    unlabeled: &UnlabeledData,
    zmap: &ZMap,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    grid: GridSpec,
) -> Result<SandwichParts> {
    let rule = IntegrationRule::from_spec(grid)?;
    let (h_hat, floored) = hessian_hat(labeled.x(), labeled.y(), alpha, basis, &rule, None)?;
    let scores = score_contributions(labeled.x(), labeled.y(), alpha, basis, &rule)?;
    let z_l = zmap.apply_matrix(labeled.x())?;
    let sigma = if unlabeled.n() == 0 {
        sigma_hat(scores.view())
    } else {
        let z_u = zmap.apply_matrix(unlabeled.x())?;
        sigma_rho_hat(scores.view(), z_l.view(), z_u.view())?
    };
    Ok(SandwichParts {
        h_hat,
        sigma,
        semi_supervised: unlabeled.n() > 0,
        floored,
        n: labeled.n(),
    })
}

/// Covariance of `beta_tau = alpha m(tau)`:
/// `btilde' H^{-1} Sigma H^{-1} btilde / n` with `btilde = m(tau) (x) I_p`.
pub fn beta_covariance(
    parts: &SandwichParts,
    tau: f64,
    basis: &BasisSpec,
    grid: GridSpec,
) -> Result<BetaCovariance> {
    let pq = parts.h_hat.nrows();
    let q = basis.len();
    if q == 0 || !pq.is_multiple_of(q) || parts.sigma.nrows() != pq {
        return Err(ExtremileError::Dimension(format!(
            "sandwich blocks are {pq}x{pq} but the basis has {q} components"
        )));
    }
    let p = pq / q;
    let rule = IntegrationRule::from_spec(grid)?;
    let m = basis_moment(basis, tau, &rule)?;
    let mut btilde = Array2::zeros((pq, p));
    for k in 0..q {
        for j in 0..p {
            btilde[[k * p + j, j]] = m.values()[k];
        }
    }
    let chol = linalg::cholesky(parts.h_hat.view(), "curvature matrix (not positive definite)")?;
    let mut hinv_b = Array2::zeros((pq, p));
    for j in 0..p {
        hinv_b
            .column_mut(j)
            .assign(&linalg::chol_solve(&chol, btilde.column(j)));
    }
    let mut cov = hinv_b.t().dot(&parts.sigma).dot(&hinv_b);
    cov /= parts.n as f64;
    let ct = cov.t().to_owned();
    cov += &ct;
    cov /= 2.0;
    let se = Array1::from_shape_fn(p, |j| cov[[j, j]].max(0.0).sqrt());
    Ok(BetaCovariance { tau, cov, se })
}

/// Sandwich covariance at every stored order of a fitted model. For a
/// semi-supervised fit pass the pool and feature map used when fitting.
pub fn fit_covariances(
    fit: &ExtremileFit,
    labeled: &LabeledData,
    pool: Option<(&UnlabeledData, &ZMap)>,
) -> Result<Vec<BetaCovariance>> {
    let parts = match (fit.mode, pool) {
        (FitMode::SemiSupervised, Some((unlabeled, zmap))) => {
            sandwich_semisupervised(labeled, unlabeled, zmap, &fit.alpha, &fit.basis, fit.grid)?
        }
        (FitMode::SemiSupervised, None) => {
            return Err(ExtremileError::Dimension(
                "semi-supervised fit needs its unlabeled pool and feature map for inference".into(),
            ))
        }
        (FitMode::Supervised, _) => sandwich_supervised(labeled, &fit.alpha, &fit.basis, fit.grid)?,
    };
    fit.taus
        .iter()
        .map(|&tau| beta_covariance(&parts, tau, &fit.basis, fit.grid))
        .collect()
}
