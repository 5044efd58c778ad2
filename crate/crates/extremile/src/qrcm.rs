//! Quantile-regression-coefficient modelling: the integrated check loss,
//! its score, and the smoothed quasi-Newton fitter.
//!
//! The model writes the whole conditional quantile function as
//! `q(t | x) = x' alpha b(t)` with `alpha` a `p x q` coefficient matrix and
//! `b` a fixed basis. The estimator minimizes the check loss integrated over
//! the quantile level,
//!
//! ```text
//! L(alpha) = sum_i w_i * integral_0^1 rho_t( y_i - x_i' alpha b(t) ) dt,
//! ```
//!
//! whose gradient in `Vec(alpha)` (columns stacked) is
//! `S(alpha) = sum_i w_i * integral { b(t) (x) x_i } [ I(y_i < x_i' alpha b(t)) - t ] dt`.
//! `L` is convex for nonnegative weights but only piecewise smooth, so the
//! fitter optimizes a Huber-smoothed version with half-width `kappa` and
//! drives `kappa` down a geometric continuation schedule; the smoothed loss
//! is within `kappa/4` of the exact one per unit weight. If the data are
//! interpolated (the mean loss itself is of order `kappa`, e.g. noiseless
//! responses), the schedule keeps shrinking `kappa` below the nominal floor
//! so the minimizer converges to the exact-interpolation solution; the hard
//! floor `kappa_init * 1e-7` keeps `u / kappa` well clear of rounding noise
//! in the residuals.
//!
//! Both integrals use one shared quadrature rule, so `score` is the exact
//! gradient of `integrated_loss` at every smoothing level.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::basis::BasisSpec;
use crate::error::{ExtremileError, Result};
use crate::linalg;
use crate::quad::{GridSpec, IntegrationRule};

/// Coefficient matrix `alpha` of the quantile-function model, `p x q`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefMatrix {
    alpha: Array2<f64>,
}

impl CoefMatrix {
    /// Wrap a `p x q` array.
    pub fn new(alpha: Array2<f64>) -> Self {
        Self { alpha }
    }

    /// Zero matrix of the given shape.
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            alpha: Array2::zeros((p, q)),
        }
    }

    /// Covariate dimension `p`.
    pub fn p(&self) -> usize {
        self.alpha.nrows()
    }

    /// Basis dimension `q`.
    pub fn q(&self) -> usize {
        self.alpha.ncols()
    }

    /// The underlying array.
    pub fn array(&self) -> &Array2<f64> {
        &self.alpha
    }

    /// Column-stacked vector `Vec(alpha)`, so that
    /// `(b (x) x)' Vec(alpha) = x' alpha b`.
    pub fn vec(&self) -> Array1<f64> {
        let (p, q) = (self.p(), self.q());
        let mut v = Array1::zeros(p * q);
        for k in 0..q {
            for j in 0..p {
                v[k * p + j] = self.alpha[[j, k]];
            }
        }
        v
    }

    /// Rebuild from a column-stacked vector.
    pub fn from_vec(p: usize, q: usize, v: ArrayView1<f64>) -> Result<Self> {
        if v.len() != p * q {
            return Err(ExtremileError::Dimension(format!(
                "coefficient vector has length {}, expected {p} * {q}",
                v.len()
            )));
        }
        let mut alpha = Array2::zeros((p, q));
        for k in 0..q {
            for j in 0..p {
                alpha[[j, k]] = v[k * p + j];
            }
        }
        Ok(Self { alpha })
    }

    /// Model quantile `q(t | x) = x' alpha b(t)`.
    pub fn eval_quantile(&self, x: ArrayView1<f64>, basis: &BasisSpec, t: f64) -> Result<f64> {
        if x.len() != self.p() || basis.len() != self.q() {
            return Err(ExtremileError::Dimension(format!(
                "eval_quantile: x has length {}, basis {}, alpha is {}x{}",
                x.len(),
                basis.len(),
                self.p(),
                self.q()
            )));
        }
        let b = basis.eval(t);
        let mut acc = 0.0;
        for j in 0..self.p() {
            let mut row = 0.0;
            for (&a, &bk) in self.alpha.row(j).iter().zip(b.iter()) {
                row += a * bk;
            }
            acc += x[j] * row;
        }
        Ok(acc)
    }

    /// Extremile coefficient `beta_tau = alpha m(tau)` for a moment vector.
    pub fn beta(&self, moments: &crate::basis::MomentVector) -> Result<Array1<f64>> {
        if moments.values().len() != self.q() {
            return Err(ExtremileError::Dimension(format!(
                "moment vector has length {}, alpha has {} columns",
                moments.values().len(),
                self.q()
            )));
        }
        Ok(self.alpha.dot(moments.values()))
    }
}

/// Starting point for the fitter.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Constant basis column starts at the least-squares coefficients, the
    /// first non-constant column's intercept entry at the residual spread.
    Heuristic,
    /// Start from a given `p x q` coefficient matrix.
    Warm(Array2<f64>),
    /// All zeros.
    Zero,
}

/// Options for [`fit_qrcm`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Quadrature rule for the quantile-level integrals.
    pub grid: GridSpec,
    /// Initial smoothing half-width, response units; default `0.1 * sd(y)`.
    pub kappa_init: Option<f64>,
    /// Final smoothing half-width, response units; default `1e-3 * sd(y)`.
    pub kappa_min: Option<f64>,
    /// Total iteration budget across all continuation stages.
    pub max_iter: usize,
    /// Convergence threshold on the inf-norm of the weighted-mean score.
    pub grad_tol: f64,
    /// Starting point.
    pub init: InitStrategy,
    /// Clamp negative weights to zero instead of accepting a nonconvex
    /// objective.
    pub floor_negative_weights: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            kappa_init: None,
            kappa_min: None,
            max_iter: 1000,
            grad_tol: 1e-6,
            init: InitStrategy::Heuristic,
            floor_negative_weights: false,
        }
    }
}

/// Monotonicity diagnostic for a fitted quantile function: the model is
/// valid where the level slope `x' alpha b'(t)` stays positive.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    /// Fraction of checked (row, node) pairs with strictly negative slope.
    pub violation_fraction: f64,
    /// Number of (row, node) pairs checked.
    pub checked: usize,
    /// Up to ten most negative slopes as `(row index, t, slope)`.
    pub worst: Vec<(usize, f64, f64)>,
}

/// Convergence and conditioning facts from one fit.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    /// Iterations spent across all continuation stages.
    pub iterations: usize,
    /// Inf-norm of the weighted-mean score at the final iterate.
    pub grad_norm: f64,
    /// Smoothing half-width of the last stage actually optimized.
    pub kappa_final: f64,
    /// Number of strictly negative weights in the working weight vector.
    pub negative_weight_count: usize,
    /// True when negative weights made the objective potentially nonconvex.
    pub nonconvex: bool,
    /// Monotonicity check of the fitted quantile function on the sample.
    pub monotonicity: MonotonicityReport,
}

/// A fitted coefficient matrix with its diagnostics.
#[derive(Debug, Clone)]
pub struct QrcmFit {
    pub alpha: CoefMatrix,
    pub diagnostics: FitDiagnostics,
}

/// Integrated (optionally smoothed) check loss at `alpha`.
///
/// `kappa = 0` gives the exact check loss; `kappa > 0` replaces it with the
/// Huber-smoothed version used by the fitter. Weights default to one.
pub fn integrated_loss(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    kappa: f64,
    rule: &IntegrationRule,
) -> Result<f64> {
    let prob = Problem::new(x, y, weights, basis, rule)?;
    prob.check_alpha(alpha)?;
    if !(kappa >= 0.0) {
        return Err(ExtremileError::Domain(format!(
            "smoothing half-width kappa = {kappa} must be nonnegative"
        )));
    }
    let mut ws = Workspace::new(&prob);
    Ok(ws.loss(&prob, &alpha.vec(), kappa))
}

/// Gradient of [`integrated_loss`] in `Vec(alpha)`; with `kappa = 0` the
/// indicator is the hard `I(u < 0)`.
pub fn score(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    kappa: f64,
    rule: &IntegrationRule,
) -> Result<Array1<f64>> {
    let prob = Problem::new(x, y, weights, basis, rule)?;
    prob.check_alpha(alpha)?;
    if !(kappa >= 0.0) {
        return Err(ExtremileError::Domain(format!(
            "smoothing half-width kappa = {kappa} must be nonnegative"
        )));
    }
    let mut ws = Workspace::new(&prob);
    let (_, grad) = ws.loss_grad(&prob, &alpha.vec(), kappa);
    Ok(grad)
}

/// Fit the coefficient matrix by smoothed quasi-Newton descent with a
/// geometric continuation schedule on the smoothing half-width.
pub fn fit_qrcm(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    basis: &BasisSpec,
    opts: &FitOptions,
) -> Result<QrcmFit> {
    let mut prob = Problem::new(x, y, weights, basis, &IntegrationRule::from_spec(opts.grid)?)?;
    let negative_weight_count = prob.weights.iter().filter(|&&w| w < 0.0).count();
    if opts.floor_negative_weights && negative_weight_count > 0 {
        for w in prob.weights.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        prob.weight_sum = prob.weights.sum();
    }
    let nonconvex = negative_weight_count > 0 && !opts.floor_negative_weights;

    // Rank check up front so singular designs fail with a named column
    // instead of a meaningless optimum.
    let xtx = prob.x.t().dot(&prob.x);
    linalg::cholesky(xtx.view(), "design matrix (columns collinear)")?;

    let scale = if prob.sd_y > 0.0 { prob.sd_y } else { 1.0 };
    let kappa0 = opts.kappa_init.unwrap_or(0.1 * scale);
    let kappa_min = opts.kappa_min.unwrap_or(1e-3 * scale);
    if !(kappa0.is_finite() && kappa_min.is_finite() && kappa0 >= kappa_min && kappa_min > 0.0) {
        return Err(ExtremileError::Domain(format!(
            "smoothing schedule requires kappa_init >= kappa_min > 0, got {kappa0} and {kappa_min}"
        )));
    }
    if !(opts.grad_tol > 0.0) {
        return Err(ExtremileError::Domain(format!(
            "grad_tol = {} must be positive",
            opts.grad_tol
        )));
    }

    let init = match &opts.init {
        InitStrategy::Zero => CoefMatrix::zeros(prob.p, prob.q),
        InitStrategy::Warm(a) => {
            if a.dim() != (prob.p, prob.q) {
                return Err(ExtremileError::Dimension(format!(
                    "warm start is {}x{}, model needs {}x{}",
                    a.nrows(),
                    a.ncols(),
                    prob.p,
                    prob.q
                )));
            }
            CoefMatrix::new(a.clone())
        }
        InitStrategy::Heuristic => {
            if nonconvex {
                // A nonconvex weighted objective starts from the solution of
                // the convex unit-weight problem.
                let base = fit_qrcm(
                    x,
                    y,
                    None,
                    basis,
                    &FitOptions {
                        init: InitStrategy::Heuristic,
                        floor_negative_weights: false,
                        ..opts.clone()
                    },
                )?;
                base.alpha
            } else {
                heuristic_init(&prob)?
            }
        }
    };

    // Continuation schedule: kappa0, kappa0/10, ..., ending exactly at
    // kappa_min.
    let mut kappas = Vec::new();
    let mut k = kappa0;
    while k > kappa_min * (1.0 + 1e-12) {
        kappas.push(k);
        k /= 10.0;
    }
    kappas.push(kappa_min);

    let mut ws = Workspace::new(&prob);
    let mut state = BfgsState::new(init.vec(), scale);
    let mut iterations = 0usize;
    let mut kappa_final = kappa_min;
    for &kappa in &kappas {
        kappa_final = kappa;
        state.minimize(&prob, &mut ws, kappa, opts.grad_tol, opts.max_iter, &mut iterations);
        if iterations >= opts.max_iter {
            break;
        }
    }
    // Interpolation regime: when the mean loss is itself of order kappa the
    // smoothing floor dominates the optimum, so keep sharpening.
    let ext_floor = kappa0 * 1e-7;
    while iterations < opts.max_iter {
        let mean_loss = ws.loss(&prob, &state.x, kappa_final) / prob.norm();
        if mean_loss > kappa_final || kappa_final <= ext_floor {
            break;
        }
        kappa_final /= 10.0;
        state.minimize(&prob, &mut ws, kappa_final, opts.grad_tol, opts.max_iter, &mut iterations);
    }

    let (_, grad) = ws.loss_grad(&prob, &state.x, kappa_final);
    let grad_norm = inf_norm(&grad) / prob.norm();
    let alpha = CoefMatrix::from_vec(prob.p, prob.q, state.x.view())?;
    if grad_norm > opts.grad_tol {
        return Err(ExtremileError::NonConvergence {
            iterations,
            grad_norm,
            best_alpha: Box::new(alpha.array().clone()),
        });
    }
    let monotonicity = check_monotonicity(&alpha, basis, prob.x.view(), &prob.rule)?;
    Ok(QrcmFit {
        alpha,
        diagnostics: FitDiagnostics {
            iterations,
            grad_norm,
            kappa_final,
            negative_weight_count,
            nonconvex,
            monotonicity,
        },
    })
}

/// Fraction of (row, node) pairs where the fitted quantile function has a
/// strictly negative level slope, with the worst offenders.
///
/// Zero slopes count as monotone so constant-quantile models pass.
pub fn check_monotonicity(
    alpha: &CoefMatrix,
    basis: &BasisSpec,
    xs: ArrayView2<f64>,
    rule: &IntegrationRule,
) -> Result<MonotonicityReport> {
    if xs.ncols() != alpha.p() || basis.len() != alpha.q() {
        return Err(ExtremileError::Dimension(format!(
            "monotonicity check: rows have {} columns, basis {}, alpha is {}x{}",
            xs.ncols(),
            basis.len(),
            alpha.p(),
            alpha.q()
        )));
    }
    let rule = basis.working_rule(rule)?;
    let g = rule.len();
    let q = basis.len();
    let mut dmat = Array2::zeros((g, q));
    for (row, &t) in rule.nodes().iter().enumerate() {
        basis.deriv_into(t, dmat.row_mut(row).as_slice_mut().expect("row contiguous"));
    }
    // slopes[i, g] = x_i' alpha b'(t_g)
    let slopes = xs.dot(alpha.array()).dot(&dmat.t());
    let mut violations = 0usize;
    let mut worst: Vec<(usize, f64, f64)> = Vec::new();
    for (i, row) in slopes.rows().into_iter().enumerate() {
        for (gidx, &s) in row.iter().enumerate() {
            if s < 0.0 {
                violations += 1;
                worst.push((i, rule.nodes()[gidx], s));
            }
        }
    }
    worst.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    worst.truncate(10);
    let checked = xs.nrows() * g;
    Ok(MonotonicityReport {
        violation_fraction: if checked == 0 {
            0.0
        } else {
            violations as f64 / checked as f64
        },
        checked,
        worst,
    })
}

/// Validated inputs plus everything precomputable for one fit.
struct Problem {
    x: Array2<f64>,
    y: Array1<f64>,
    weights: Array1<f64>,
    weight_sum: f64,
    bmat: Array2<f64>, // G x q
    rule: IntegrationRule,
    sd_y: f64,
    p: usize,
    q: usize,
    n: usize,
}

impl Problem {
    fn new(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        weights: Option<ArrayView1<f64>>,
        basis: &BasisSpec,
        rule: &IntegrationRule,
    ) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        let q = basis.len();
        if n == 0 || p == 0 {
            return Err(ExtremileError::Empty("design matrix with no rows or columns".into()));
        }
        if q == 0 {
            return Err(ExtremileError::Empty("basis with zero components".into()));
        }
        if y.len() != n {
            return Err(ExtremileError::Dimension(format!(
                "design has {n} rows but response has {} entries",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ExtremileError::NonFinite("design matrix contains non-finite entries".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ExtremileError::NonFinite("response contains non-finite entries".into()));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(ExtremileError::Dimension(format!(
                        "weights have {} entries for {n} observations",
                        w.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(ExtremileError::NonFinite("weights contain non-finite entries".into()));
                }
                w.to_owned()
            }
            None => Array1::ones(n),
        };
        let (bmat, rule) = basis.eval_on(rule)?;
        let mean = y.sum() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let weight_sum = weights.sum();
        Ok(Self {
            x: x.to_owned(),
            y: y.to_owned(),
            weights,
            weight_sum,
            bmat,
            rule,
            sd_y: var.sqrt(),
            p,
            q,
            n,
        })
    }

    fn check_alpha(&self, alpha: &CoefMatrix) -> Result<()> {
        if alpha.p() != self.p || alpha.q() != self.q {
            return Err(ExtremileError::Dimension(format!(
                "alpha is {}x{}, model needs {}x{}",
                alpha.p(),
                alpha.q(),
                self.p,
                self.q
            )));
        }
        Ok(())
    }

    /// Normalizer turning sums into weighted means; positive even when the
    /// weights sum to something degenerate.
    fn norm(&self) -> f64 {
        if self.weight_sum > 0.0 {
            self.weight_sum
        } else {
            self.n as f64
        }
    }
}

/// Reusable buffers for loss/gradient evaluation.
struct Workspace {
    c: Array2<f64>,   // n x q: x alpha
    u: Array2<f64>,   // n x G: residuals y - c b'
    psi: Array2<f64>, // n x G: weighted indicator gap
    grad_pq: Array2<f64>,
    xt_psi: Array2<f64>, // p x G
}

impl Workspace {
    fn new(prob: &Problem) -> Self {
        let g = prob.rule.len();
        Self {
            c: Array2::zeros((prob.n, prob.q)),
            u: Array2::zeros((prob.n, g)),
            psi: Array2::zeros((prob.n, g)),
            grad_pq: Array2::zeros((prob.p, prob.q)),
            xt_psi: Array2::zeros((prob.p, g)),
        }
    }

    /// Residual matrix `u[i, g] = y_i - x_i' alpha b(t_g)` for the current
    /// coefficient vector.
    fn residuals(&mut self, prob: &Problem, alpha_vec: &Array1<f64>) {
        let alpha = CoefMatrix::from_vec(prob.p, prob.q, alpha_vec.view())
            .expect("internal coefficient vector has the right length");
        ndarray::linalg::general_mat_mul(1.0, &prob.x, alpha.array(), 0.0, &mut self.c);
        ndarray::linalg::general_mat_mul(-1.0, &self.c, &prob.bmat.t(), 0.0, &mut self.u);
        for (mut row, &yi) in self.u.rows_mut().into_iter().zip(prob.y.iter()) {
            row += yi;
        }
    }

    fn loss(&mut self, prob: &Problem, alpha_vec: &Array1<f64>, kappa: f64) -> f64 {
        self.residuals(prob, alpha_vec);
        let wq = prob.rule.weights();
        let ts = prob.rule.nodes();
        let mut total = 0.0;
        for (i, row) in self.u.rows().into_iter().enumerate() {
            let wi = prob.weights[i];
            let mut acc = 0.0;
            for (g, &u) in row.iter().enumerate() {
                acc += wq[g] * rho_smoothed(u, ts[g], kappa);
            }
            total += wi * acc;
        }
        total
    }

    fn loss_grad(&mut self, prob: &Problem, alpha_vec: &Array1<f64>, kappa: f64) -> (f64, Array1<f64>) {
        self.residuals(prob, alpha_vec);
        let wq = prob.rule.weights();
        let ts = prob.rule.nodes();
        let mut total = 0.0;
        for i in 0..prob.n {
            let wi = prob.weights[i];
            let mut acc = 0.0;
            for g in 0..self.u.ncols() {
                let u = self.u[[i, g]];
                let t = ts[g];
                acc += wq[g] * rho_smoothed(u, t, kappa);
                self.psi[[i, g]] = wi * wq[g] * (indicator_smoothed(u, kappa) - t);
            }
            total += wi * acc;
        }
        // grad(alpha) = X' Psi B, flattened column-major.
        ndarray::linalg::general_mat_mul(1.0, &prob.x.t(), &self.psi, 0.0, &mut self.xt_psi);
        ndarray::linalg::general_mat_mul(1.0, &self.xt_psi, &prob.bmat, 0.0, &mut self.grad_pq);
        let mut grad = Array1::zeros(prob.p * prob.q);
        for k in 0..prob.q {
            for j in 0..prob.p {
                grad[k * prob.p + j] = self.grad_pq[[j, k]];
            }
        }
        (total, grad)
    }
}

/// Smoothed check loss `rho^kappa_t(u) = huber_kappa(u)/2 + (t - 1/2) u`.
#[inline]
fn rho_smoothed(u: f64, t: f64, kappa: f64) -> f64 {
    let a = u.abs();
    let huber = if kappa > 0.0 && a <= kappa {
        u * u / (2.0 * kappa) + 0.5 * kappa
    } else {
        a
    };
    0.5 * huber + (t - 0.5) * u
}

/// Smoothed indicator: ramps from 1 to 0 over `[-kappa, kappa]`; the hard
/// `I(u < 0)` at `kappa = 0`.
#[inline]
fn indicator_smoothed(u: f64, kappa: f64) -> f64 {
    if kappa > 0.0 {
        0.5 * (1.0 - (u / kappa).clamp(-1.0, 1.0))
    } else if u < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Least-squares-anchored starting point: the constant basis column carries
/// the mean regression, the first moving column's intercept entry carries
/// the residual spread.
fn heuristic_init(prob: &Problem) -> Result<CoefMatrix> {
    let mut alpha = CoefMatrix::zeros(prob.p, prob.q);
    let constant_col = (0..prob.q).find(|&k| {
        prob.bmat.column(k).iter().all(|&v| (v - 1.0).abs() < 1e-12)
    });
    let Some(k0) = constant_col else {
        return Ok(alpha);
    };
    let beta = linalg::ols(prob.x.view(), prob.y.view(), "design matrix (columns collinear)")?;
    let fitted = prob.x.dot(&beta);
    let resid_var = prob
        .y
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f) * (y - f))
        .sum::<f64>()
        / prob.n as f64;
    let spread = resid_var.sqrt();
    {
        let arr = alpha_mut(&mut alpha);
        for j in 0..prob.p {
            arr[[j, k0]] = beta[j];
        }
        if let Some(k1) = (0..prob.q).find(|&k| k != k0 && !is_constant_col(&prob.bmat, k)) {
            arr[[0, k1]] = spread;
        }
    }
    Ok(alpha)
}

fn is_constant_col(bmat: &Array2<f64>, k: usize) -> bool {
    let first = bmat[[0, k]];
    bmat.column(k).iter().all(|&v| (v - first).abs() < 1e-12)
}

fn alpha_mut(alpha: &mut CoefMatrix) -> &mut Array2<f64> {
    &mut alpha.alpha
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Dense BFGS with backtracking line search on the weighted-mean objective.
struct BfgsState {
    x: Array1<f64>,
    h: Array2<f64>,
    gamma: f64,
}

impl BfgsState {
    fn new(x0: Array1<f64>, scale: f64) -> Self {
        let m = x0.len();
        // Initial inverse Hessian in response units keeps the first step
        // scale-equivariant.
        let gamma = scale.max(1e-12);
        Self {
            x: x0,
            h: Array2::eye(m) * gamma,
            gamma,
        }
    }

    /// Run BFGS at fixed `kappa` until the mean-score inf-norm falls under
    /// `tol` or the shared iteration budget runs out.
    fn minimize(
        &mut self,
        prob: &Problem,
        ws: &mut Workspace,
        kappa: f64,
        tol: f64,
        max_iter: usize,
        iterations: &mut usize,
    ) {
        let norm = prob.norm();
        let m = self.x.len();
        // Fresh curvature per stage: the smoothed Hessian scales like 1/kappa
        // near the kinks, so stale stage curvature misleads more than it helps.
        self.h = Array2::eye(m) * self.gamma;
        let (mut f, mut grad) = ws.loss_grad(prob, &self.x, kappa);
        f /= norm;
        grad.mapv_inplace(|v| v / norm);
        let mut first_update = true;
        while *iterations < max_iter {
            if inf_norm(&grad) <= tol {
                return;
            }
            *iterations += 1;
            let mut dir = -self.h.dot(&grad);
            let mut slope = dir.dot(&grad);
            if !(slope < 0.0) {
                // Curvature model broke down; fall back to steepest descent.
                self.h = Array2::eye(m) * self.gamma;
                dir = -grad.clone() * self.gamma;
                slope = dir.dot(&grad);
                first_update = true;
            }
            // Backtracking Armijo search from the natural quasi-Newton step.
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = &self.x + &(&dir * step);
                let fc = ws.loss(prob, &cand, kappa) / norm;
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fn_)) = accepted else {
                // No representable decrease along the direction: the iterate
                // sits at this stage's numerical floor.
                return;
            };
            let (_, mut gn) = ws.loss_grad(prob, &xn, kappa);
            gn.mapv_inplace(|v| v / norm);
            let s = &xn - &self.x;
            let yv = &gn - &grad;
            let sy = s.dot(&yv);
            if first_update {
                let yy = yv.dot(&yv);
                if sy > 0.0 && yy > 0.0 {
                    self.h = Array2::eye(m) * (sy / yy);
                }
                first_update = false;
            }
            let s_norm = s.dot(&s).sqrt();
            let y_norm = yv.dot(&yv).sqrt();
            if sy > 1e-12 * s_norm * y_norm {
                // H <- (I - rho s y') H (I - rho y s') + rho s s'
                let rho = 1.0 / sy;
                let hy = self.h.dot(&yv);
                let yhy = yv.dot(&hy);
                let coef = (1.0 + rho * yhy) * rho;
                for i in 0..m {
                    for j in 0..m {
                        self.h[[i, j]] += coef * s[i] * s[j] - rho * (s[i] * hy[j] + hy[i] * s[j]);
                    }
                }
            }
            self.x = xn;
            f = fn_;
            grad = gn;
        }
    }
}
