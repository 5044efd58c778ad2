//! Linear extremile regression.
//!
//! An extremile of order `tau` is the weighted mean `E{ Y * J_tau(F(Y)) }`,
//! a least-squares analogue of a quantile that spreads weight over the whole
//! distribution through the density `J_tau` of a measure `H_tau` instead of
//! selecting a single order statistic. This crate estimates *linear
//! regression extremiles* `beta_tau` by modelling the conditional quantile
//! function as `q(t | x) = x' alpha b(t)` for a small basis `b` and
//! minimizing the integrated quantile check loss in the coefficient matrix
//! `alpha`. The extremile coefficient falls out as `beta_tau = alpha m(tau)`
//! with the moment vector `m(tau) = integral of b(t) J_tau(t) dt`.
//!
//! Modules:
//! - [`weight`]: the measure `H_tau`, its density, and sample extremiles.
//! - [`quad`]: integration rules on the unit interval.
//! - [`basis`]: quantile-function bases `b(t)` and moment vectors `m(tau)`.
//! - [`qrcm`]: the integrated check loss, its score, and the smoothed
//!   quasi-Newton fitter for the coefficient matrix `alpha`.
//! - [`estimators`]: supervised, semi-supervised (unlabeled-covariate
//!   reweighted), and kernel-weighted ordinary estimators.
//! - [`inference`]: sandwich covariance for the fitted coefficients.
//! - [`simlab`]: seeded data generators and the replication harness.

// `!(x > 0.0)`-style guards intentionally reject NaN along with the
// out-of-range values; the `partial_cmp` rewrite clippy suggests hides that.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Frozen reference constants keep every digit of the independently computed
// values they came from, even where f64 rounds the tail away.
#![allow(clippy::excessive_precision)]

pub mod basis;
pub mod error;
pub mod estimators;
pub mod inference;
mod linalg;
pub mod qrcm;
pub mod quad;
pub mod simlab;
pub mod weight;

pub use basis::{basis_moment, BasisSpec, MomentVector};
pub use error::{ExtremileError, Result};
pub use estimators::{
    default_bandwidths, fit_ordinary, fit_semisupervised, fit_supervised, nw_cdf, ssl_weights,
    CdfEstimate, ExtremileFit, FitMode, Kernel, LabeledData, OrdinaryFit, OrdinaryOptions,
    UnlabeledData, ZMap,
};
pub use inference::{
    beta_covariance, fit_covariances, hessian_hat, sandwich_semisupervised, sandwich_supervised,
    score_contributions, sigma_hat, sigma_rho_hat, BetaCovariance, SandwichParts,
};
pub use qrcm::{
    check_monotonicity, fit_qrcm, integrated_loss, score, CoefMatrix, FitDiagnostics, FitOptions,
    InitStrategy, MonotonicityReport, QrcmFit,
};
pub use quad::{GridSpec, IntegrationRule};
pub use simlab::{
    run_replications, BasisChoice, Design, ErrorLaw, Method, SigmaMode, SimConfig, SimSummary,
    ZMapChoice, SCHEMA_VERSION,
};
pub use weight::{h_weight, j_weight, sample_extremile, WeightMeasure};
