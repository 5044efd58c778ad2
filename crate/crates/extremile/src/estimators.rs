//! The three extremile-coefficient estimators.
//!
//! Supervised (`fit_supervised`): minimize the integrated check loss on the
//! labeled sample and map the coefficient matrix through the moment vector,
//! `beta_tau = alpha m(tau)`.
//!
//! Semi-supervised (`fit_semisupervised`): identical objective but each
//! labeled observation carries the projection weight
//! `w_i = 1 + (N/n) zbar_N' SigmaZ^{-1} z_i`, built from a feature map `z`
//! of the covariates evaluated on both samples. The weights sum to `n + N`
//! whenever `z_1 = 1`, and they transfer covariate information from the
//! unlabeled pool without touching the response model.
//!
//! Ordinary (`fit_ordinary`): the direct weighted-least-squares analogue
//! `(X' W X)^{-1} X' W Y` with `W_ii = J_tau(Fhat(Y_i | X_i))`, where the
//! conditional CDF is either supplied or estimated by a Nadaraya-Watson
//! product kernel over the non-constant covariates. With a kernel CDF this
//! estimator converges at the nonparametric rate; the model-based estimators
//! above keep the parametric root-n rate.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::basis::{basis_moment, BasisSpec};
use crate::error::{ExtremileError, Result};
use crate::linalg;
use crate::qrcm::{fit_qrcm, CoefMatrix, FitDiagnostics, FitOptions};
use crate::quad::IntegrationRule;
use crate::weight::WeightMeasure;

/// A labeled sample: design matrix rows paired with responses.
#[derive(Debug, Clone)]
pub struct LabeledData {
    x: Array2<f64>,
    y: Array1<f64>,
}

impl LabeledData {
    /// Validate shapes and finiteness.
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ExtremileError::Empty("labeled design with no rows or columns".into()));
        }
        if y.len() != x.nrows() {
            return Err(ExtremileError::Dimension(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ExtremileError::NonFinite("labeled sample contains non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// An unlabeled sample: covariate rows only, same column layout as the
/// labeled design.
#[derive(Debug, Clone)]
pub struct UnlabeledData {
    x: Array2<f64>,
}

impl UnlabeledData {
    /// Validate finiteness; zero rows is allowed and means "no pool".
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ExtremileError::NonFinite("unlabeled sample contains non-finite entries".into()));
        }
        Ok(Self { x })
    }

    /// An empty pool with the given column count.
    pub fn empty(p: usize) -> Self {
        Self {
            x: Array2::zeros((0, p)),
        }
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Row-wise feature evaluator for a custom [`ZMap`].
pub type ZMapFn = Arc<dyn Fn(ArrayView1<f64>, &mut [f64]) + Send + Sync>;

/// Conditional CDF `F(y | x)` evaluated at a full design row.
pub type CondCdfFn = Arc<dyn Fn(ArrayView1<f64>, f64) -> f64 + Send + Sync>;

/// Feature map `z(x)` used to project score information onto the unlabeled
/// pool. The first component must be identically one; that normalization
/// makes the semi-supervised weights sum to `n + N` exactly.
#[derive(Clone)]
pub enum ZMap {
    /// `z = (1)`: no covariate information, weights collapse to a constant.
    Constant,
    /// `z = (1, x_2, ..., x_p)`: column 0 of the design is treated as the
    /// intercept and skipped.
    Linear,
    /// `z = (1, x_2, ..., x_p, x_j x_k for j <= k)`: linear terms plus all
    /// pairwise products (including squares) of the non-intercept columns.
    Interactions,
    /// User-supplied map; must still put 1 in the first slot.
    Custom { name: String, len: usize, eval: ZMapFn },
}

impl std::fmt::Debug for ZMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ZMap({})", self.name())
    }
}

impl ZMap {
    pub fn name(&self) -> &str {
        match self {
            ZMap::Constant => "constant",
            ZMap::Linear => "linear",
            ZMap::Interactions => "interactions",
            ZMap::Custom { name, .. } => name,
        }
    }

    /// Output dimension `d` for a design with `p` columns.
    pub fn len(&self, p: usize) -> usize {
        let m = p.saturating_sub(1);
        match self {
            ZMap::Constant => 1,
            ZMap::Linear => 1 + m,
            ZMap::Interactions => 1 + m + m * (m + 1) / 2,
            ZMap::Custom { len, .. } => *len,
        }
    }

    /// True when `len` would be zero (only possible for a degenerate custom
    /// map).
    pub fn is_empty(&self, p: usize) -> bool {
        self.len(p) == 0
    }

    /// Apply the map to one design row.
    pub fn apply_into(&self, row: ArrayView1<f64>, out: &mut [f64]) {
        match self {
            ZMap::Constant => out[0] = 1.0,
            ZMap::Linear => {
                out[0] = 1.0;
                for (k, &v) in row.iter().skip(1).enumerate() {
                    out[1 + k] = v;
                }
            }
            ZMap::Interactions => {
                out[0] = 1.0;
                let m = row.len() - 1;
                for k in 0..m {
                    out[1 + k] = row[1 + k];
                }
                let mut idx = 1 + m;
                for j in 0..m {
                    for k in j..m {
                        out[idx] = row[1 + j] * row[1 + k];
                        idx += 1;
                    }
                }
            }
            ZMap::Custom { eval, .. } => eval(row, out),
        }
    }

    /// Apply the map to every row of a design.
    pub fn apply_matrix(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.len(x.ncols());
        if d == 0 {
            return Err(ExtremileError::Empty("feature map with zero components".into()));
        }
        let mut z = Array2::zeros((x.nrows(), d));
        for (i, row) in x.rows().into_iter().enumerate() {
            self.apply_into(row, z.row_mut(i).as_slice_mut().expect("row contiguous"));
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(ExtremileError::NonFinite(format!(
                "feature map {} produced non-finite value {bad}",
                self.name()
            )));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            if (row[0] - 1.0).abs() > 1e-12 {
                return Err(ExtremileError::Domain(format!(
                    "feature map {} must have first component 1, got {} on row {i}",
                    self.name(),
                    row[0]
                )));
            }
        }
        Ok(z)
    }
}

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FitMode {
    Supervised,
    SemiSupervised,
}

/// A fitted extremile regression: the coefficient matrix plus the extremile
/// coefficients at the requested orders.
#[derive(Debug, Clone)]
pub struct ExtremileFit {
    pub mode: FitMode,
    pub alpha: CoefMatrix,
    pub basis: BasisSpec,
    pub grid: crate::quad::GridSpec,
    pub taus: Vec<f64>,
    /// Row `k` holds `beta_{tau_k} = alpha m(tau_k)`.
    pub betas: Array2<f64>,
    /// Working observation weights (all ones for the supervised fit).
    pub weights: Array1<f64>,
    pub diagnostics: FitDiagnostics,
}

impl ExtremileFit {
    /// Recompute `beta_tau = alpha m(tau)` for any order; for the stored
    /// orders this reproduces the `betas` rows bit for bit.
    pub fn beta_at(&self, tau: f64) -> Result<Array1<f64>> {
        let rule = IntegrationRule::from_spec(self.grid)?;
        let m = basis_moment(&self.basis, tau, &rule)?;
        self.alpha.beta(&m)
    }
}

/// Supervised fit: integrated-check-loss estimate on the labeled sample.
pub fn fit_supervised(
    data: &LabeledData,
    basis: &BasisSpec,
    taus: &[f64],
    opts: &FitOptions,
) -> Result<ExtremileFit> {
    let weights = Array1::ones(data.n());
    fit_with_weights(data, weights, FitMode::Supervised, basis, taus, opts)
}

/// Semi-supervised projection weights
/// `w_i = 1 + (N/n) zbar_N' SigmaZ^{-1} z_i` with `SigmaZ = n^{-1} Z'Z`
/// over the labeled rows. With an empty pool the weights are exactly one.
pub fn ssl_weights(z_labeled: ArrayView2<f64>, z_unlabeled: ArrayView2<f64>) -> Result<Array1<f64>> {
    let n = z_labeled.nrows();
    let d = z_labeled.ncols();
    if n == 0 || d == 0 {
        return Err(ExtremileError::Empty("labeled feature matrix with no rows or columns".into()));
    }
    let big_n = z_unlabeled.nrows();
    if big_n == 0 {
        return Ok(Array1::ones(n));
    }
    if z_unlabeled.ncols() != d {
        return Err(ExtremileError::Dimension(format!(
            "labeled features have {d} columns, unlabeled have {}",
            z_unlabeled.ncols()
        )));
    }
    let sigma_z = z_labeled.t().dot(&z_labeled) / n as f64;
    let zbar = z_unlabeled.mean_axis(ndarray::Axis(0)).expect("nonempty pool");
    let c = linalg::solve_spd(
        sigma_z.view(),
        zbar.view(),
        "labeled feature second-moment matrix (deficient z direction)",
    )?;
    let ratio = big_n as f64 / n as f64;
    let mut w = z_labeled.dot(&c);
    w.mapv_inplace(|v| 1.0 + ratio * v);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(ExtremileError::NonFinite("semi-supervised weights are non-finite".into()));
    }
    Ok(w)
}

/// Semi-supervised fit: reweight the labeled objective using the unlabeled
/// covariate pool through the feature map, then solve the same problem.
pub fn fit_semisupervised(
    labeled: &LabeledData,
    unlabeled: &UnlabeledData,
    zmap: &ZMap,
    basis: &BasisSpec,
    taus: &[f64],
    opts: &FitOptions,
) -> Result<ExtremileFit> {
    if unlabeled.n() > 0 && unlabeled.p() != labeled.p() {
        return Err(ExtremileError::Dimension(format!(
            "labeled design has {} columns, unlabeled has {}; the covariate schemas must match",
            labeled.p(),
            unlabeled.p()
        )));
    }
    let z_l = zmap.apply_matrix(labeled.x())?;
    let weights = if unlabeled.n() == 0 {
        Array1::ones(labeled.n())
    } else {
        let z_u = zmap.apply_matrix(unlabeled.x())?;
        ssl_weights(z_l.view(), z_u.view())?
    };
    fit_with_weights(labeled, weights, FitMode::SemiSupervised, basis, taus, opts)
}

fn fit_with_weights(
    data: &LabeledData,
    weights: Array1<f64>,
    mode: FitMode,
    basis: &BasisSpec,
    taus: &[f64],
    opts: &FitOptions,
) -> Result<ExtremileFit> {
    if taus.is_empty() {
        return Err(ExtremileError::Empty("no extremile orders requested".into()));
    }
    for &tau in taus {
        WeightMeasure::new(tau)?;
    }
    let fit = fit_qrcm(data.x(), data.y(), Some(weights.view()), basis, opts)?;
    let rule = IntegrationRule::from_spec(opts.grid)?;
    let mut betas = Array2::zeros((taus.len(), data.p()));
    for (k, &tau) in taus.iter().enumerate() {
        let m = basis_moment(basis, tau, &rule)?;
        betas.row_mut(k).assign(&fit.alpha.beta(&m)?);
    }
    Ok(ExtremileFit {
        mode,
        alpha: fit.alpha,
        basis: basis.clone(),
        grid: opts.grid,
        taus: taus.to_vec(),
        betas,
        weights,
        diagnostics: fit.diagnostics,
    })
}

/// Smoothing kernel for the conditional-CDF estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    #[inline]
    fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// How `fit_ordinary` obtains the conditional CDF.
#[derive(Clone)]
pub enum CdfEstimate {
    /// Nadaraya-Watson product kernel over the non-constant covariates.
    NadarayaWatson,
    /// Oracle CDF `F(y | x)` evaluated at full design rows.
    Known(CondCdfFn),
}

impl std::fmt::Debug for CdfEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CdfEstimate::NadarayaWatson => write!(f, "NadarayaWatson"),
            CdfEstimate::Known(_) => write!(f, "Known"),
        }
    }
}

/// Options for [`fit_ordinary`].
#[derive(Debug, Clone)]
pub struct OrdinaryOptions {
    /// Per-kernel-covariate bandwidths; default is the normal-reference rule
    /// `1.06 sd n^{-1/5}` per covariate.
    pub bandwidths: Option<Vec<f64>>,
    pub kernel: Kernel,
    /// Exclude the own observation from its CDF estimate.
    pub leave_one_out: bool,
    pub cdf: CdfEstimate,
}

impl Default for OrdinaryOptions {
    fn default() -> Self {
        Self {
            bandwidths: None,
            kernel: Kernel::Gaussian,
            leave_one_out: false,
            cdf: CdfEstimate::NadarayaWatson,
        }
    }
}

/// Result of the ordinary (directly reweighted) estimator.
#[derive(Debug, Clone)]
pub struct OrdinaryFit {
    pub tau: f64,
    pub beta: Array1<f64>,
    /// `J_tau` weights actually used, after CDF clipping.
    pub weights: Array1<f64>,
    /// Estimated conditional CDF values at the observations, after clipping.
    pub fhat: Array1<f64>,
    /// Bandwidths used for the kernel covariates (empty for a known CDF).
    pub bandwidths: Vec<f64>,
}

/// Nadaraya-Watson conditional CDF estimate
/// `Fhat(y0 | x0) = sum_i K_h(x_i - x0) I(y_i <= y0) / sum_i K_h(x_i - x0)`
/// with a product kernel; `leave_out` drops one row from both sums.
pub fn nw_cdf(
    covariates: ArrayView2<f64>,
    y: ArrayView1<f64>,
    x0: ArrayView1<f64>,
    y0: f64,
    bandwidths: &[f64],
    kernel: Kernel,
    leave_out: Option<usize>,
) -> Result<f64> {
    let n = covariates.nrows();
    let m = covariates.ncols();
    if n == 0 {
        return Err(ExtremileError::Empty("conditional CDF from an empty sample".into()));
    }
    if y.len() != n || x0.len() != m || bandwidths.len() != m {
        return Err(ExtremileError::Dimension(format!(
            "nw_cdf: {n} rows x {m} covariates, y has {}, x0 has {}, {} bandwidths",
            y.len(),
            x0.len(),
            bandwidths.len()
        )));
    }
    if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(ExtremileError::Domain("bandwidths must be positive and finite".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if leave_out == Some(i) {
            continue;
        }
        let mut k = 1.0;
        for j in 0..m {
            k *= kernel.eval((covariates[[i, j]] - x0[j]) / bandwidths[j]);
            if k == 0.0 {
                break;
            }
        }
        den += k;
        if y[i] <= y0 {
            num += k;
        }
    }
    if !(den > 0.0) {
        return Err(ExtremileError::Singular(
            "no kernel mass at the evaluation point; enlarge the bandwidths".into(),
        ));
    }
    Ok(num / den)
}

/// Normal-reference bandwidths `1.06 sd_j n^{-1/5}`, one per column.
///
/// Uses the population standard deviation of each column; a constant column
/// has no scale to smooth over and is rejected.
pub fn default_bandwidths(covariates: ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = covariates.nrows();
    if n == 0 {
        return Err(ExtremileError::Empty("bandwidth rule on an empty sample".into()));
    }
    let mut out = Vec::with_capacity(covariates.ncols());
    for (j, col) in covariates.columns().into_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(ExtremileError::Domain(format!(
                "covariate {j} is constant; drop it from the kernel covariates"
            )));
        }
        out.push(rule_of_thumb_bandwidth(sd, n));
    }
    Ok(out)
}

/// The scalar normal-reference rule `1.06 sd n^{-1/5}`.
pub fn rule_of_thumb_bandwidth(sd: f64, n: usize) -> f64 {
    1.06 * sd * (n as f64).powf(-0.2)
}

/// Ordinary estimator: weighted least squares with weights
/// `J_tau(Fhat(Y_i | X_i))`, the CDF clipped to
/// `[1/(n+1), 1 - 1/(n+1)]` so the weights stay strictly positive.
pub fn fit_ordinary(data: &LabeledData, tau: f64, opts: &OrdinaryOptions) -> Result<OrdinaryFit> {
    let measure = WeightMeasure::new(tau)?;
    let n = data.n();
    let x = data.x();
    let y = data.y();

    let mut fhat = Array1::zeros(n);
    let mut bandwidths_used = Vec::new();
    match &opts.cdf {
        CdfEstimate::Known(f) => {
            for i in 0..n {
                fhat[i] = f(x.row(i), y[i]);
            }
        }
        CdfEstimate::NadarayaWatson => {
            // Kernel distances run over the non-constant columns; constant
            // columns (the intercept) carry no information about closeness.
            let kernel_cols: Vec<usize> = (0..data.p())
                .filter(|&j| {
                    let col = x.column(j);
                    let first = col[0];
                    !col.iter().all(|&v| v == first)
                })
                .collect();
            if kernel_cols.is_empty() {
                // Fully constant design: the conditional law is the marginal
                // law, so the CDF is the empirical one.
                for i in 0..n {
                    fhat[i] = y.iter().filter(|&&v| v <= y[i]).count() as f64 / n as f64;
                }
            } else {
                let mut cov = Array2::zeros((n, kernel_cols.len()));
                for (jj, &j) in kernel_cols.iter().enumerate() {
                    cov.column_mut(jj).assign(&x.column(j));
                }
                let bandwidths = match &opts.bandwidths {
                    Some(h) => {
                        if h.len() == 1 && kernel_cols.len() > 1 {
                            vec![h[0]; kernel_cols.len()]
                        } else if h.len() == kernel_cols.len() {
                            h.clone()
                        } else {
                            return Err(ExtremileError::Dimension(format!(
                                "{} bandwidths supplied for {} kernel covariates",
                                h.len(),
                                kernel_cols.len()
                            )));
                        }
                    }
                    None => default_bandwidths(cov.view())?,
                };
                for i in 0..n {
                    let leave = if opts.leave_one_out { Some(i) } else { None };
                    fhat[i] = nw_cdf(
                        cov.view(),
                        y,
                        cov.row(i),
                        y[i],
                        &bandwidths,
                        opts.kernel,
                        leave,
                    )?;
                }
                bandwidths_used = bandwidths;
            }
        }
    }

    // Clip so the J weight is evaluated strictly inside (0, 1).
    let lo = 1.0 / (n as f64 + 1.0);
    let hi = 1.0 - lo;
    fhat.mapv_inplace(|v| v.clamp(lo, hi));
    let mut weights = Array1::zeros(n);
    for i in 0..n {
        weights[i] = measure.j(fhat[i])?;
    }
    if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ExtremileError::NonFinite("ordinary-estimator weights are invalid".into()));
    }

    // Weighted normal equations (X' W X) beta = X' W Y.
    let mut xw = x.to_owned();
    for (mut row, &w) in xw.rows_mut().into_iter().zip(weights.iter()) {
        row *= w;
    }
    let xtwx = x.t().dot(&xw);
    let xtwy = xw.t().dot(&y);
    let beta = linalg::solve_spd(
        xtwx.view(),
        xtwy.view(),
        "weighted design gram matrix (columns collinear)",
    )?;
    Ok(OrdinaryFit {
        tau,
        beta,
        weights,
        fhat,
        bandwidths: bandwidths_used,
    })
}
