//! Seeded data generators and the Monte Carlo replication harness.
//!
//! Two synthetic designs:
//!
//! - Design A (`model-a`): `X_1, X_2 ~ U(0, 1)` independent and
//!   `Y = 1 + 2 X_1 + 3 X_2 + sigma(X) (eps - e_tau)`, where `e_tau` is the
//!   `tau`-extremile of the error law, so the conditional `tau`-extremile of
//!   `Y` is exactly `1 + 2 X_1 + 3 X_2`. Used to compare estimation error
//!   (total absolute error against the known coefficients).
//! - Design B (`model-b`): four standard normal covariates,
//!   `Y = 1 + 0.5 sum X_j + (sum X_j)^2 + (1 + 0.5 X_1 + 0.5 X_2) eps`,
//!   fitted with the misspecified linear working design `(1, X_1..X_4)`.
//!   Used to compare the sampling spread of the supervised and
//!   semi-supervised estimators (ARE, the ratio of standard deviations).
//!
//! Every replication draws from a ChaCha stream keyed by the SHA-256 hash of
//! a canonical description string, so results are reproducible across runs,
//! thread counts, and platforms, and the unlabeled pools for different sizes
//! `N` are nested prefixes of one stream.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{normal_cdf, BasisSpec};
use crate::error::{ExtremileError, Result};
use crate::estimators::{
    fit_ordinary, fit_semisupervised, fit_supervised, CdfEstimate, Kernel, LabeledData,
    OrdinaryOptions, UnlabeledData, ZMap,
};
use crate::qrcm::{FitOptions, InitStrategy};
use crate::quad::GridSpec;
use crate::weight::sample_extremile;

/// Version stamp written into every serialized summary.
pub const SCHEMA_VERSION: u32 = 1;

/// Synthetic design family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    ModelA,
    ModelB,
}

impl Design {
    pub fn label(self) -> &'static str {
        match self {
            Design::ModelA => "model-a",
            Design::ModelB => "model-b",
        }
    }

    /// Number of columns in the working design (including the intercept).
    pub fn p(self) -> usize {
        match self {
            Design::ModelA => 3,
            Design::ModelB => 5,
        }
    }
}

/// Error law for the noise term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLaw {
    Normal,
    T5,
    Uniform,
}

impl ErrorLaw {
    pub fn label(self) -> &'static str {
        match self {
            ErrorLaw::Normal => "normal",
            ErrorLaw::T5 => "t5",
            ErrorLaw::Uniform => "uniform",
        }
    }

    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorLaw::Normal => StandardNormal.sample(rng),
            ErrorLaw::T5 => StudentT::new(5.0).expect("valid dof").sample(rng),
            ErrorLaw::Uniform => rng.random::<f64>(),
        }
    }

    /// Exact CDF of the law, used by the known-CDF ordinary estimator.
    pub fn cdf(self, u: f64) -> f64 {
        match self {
            ErrorLaw::Normal => normal_cdf(u),
            ErrorLaw::T5 => t5_cdf(u),
            ErrorLaw::Uniform => u.clamp(0.0, 1.0),
        }
    }
}

/// Student t CDF with five degrees of freedom (closed form for odd dof):
/// `F(x) = 1/2 + { atan(w) + sin cos (1 + (2/3) cos^2) } / pi` with
/// `w = x / sqrt(5)`.
pub fn t5_cdf(x: f64) -> f64 {
    let w = x / 5.0f64.sqrt();
    let theta = w.atan();
    let c = theta.cos();
    let s = theta.sin();
    0.5 + (theta + s * c * (1.0 + (2.0 / 3.0) * c * c)) / std::f64::consts::PI
}

/// Noise scale for design A.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `sigma(X) = c`.
    Constant(f64),
    /// `sigma(X) = 0.4 sqrt(1 + |X_1| + |X_2|)`.
    Heteroscedastic,
}

impl SigmaMode {
    pub fn label(&self) -> String {
        match self {
            SigmaMode::Constant(c) => format!("const({c:?})"),
            SigmaMode::Heteroscedastic => "hetero".to_string(),
        }
    }

    fn value(&self, x1: f64, x2: f64) -> f64 {
        match self {
            SigmaMode::Constant(c) => *c,
            SigmaMode::Heteroscedastic => 0.4 * (1.0 + x1.abs() + x2.abs()).sqrt(),
        }
    }
}

/// Estimator to run in each replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Supervised,
    SemiSupervised,
    Ordinary,
    OrdinaryKnownCdf,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Supervised => "sl",
            Method::SemiSupervised => "ssl",
            Method::Ordinary => "oe",
            Method::OrdinaryKnownCdf => "oe-known",
        }
    }
}

/// Serializable basis selection for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisChoice {
    Polynomial { degree: usize },
    AsymmetricLogistic,
    NormalRayleigh,
}

impl BasisChoice {
    pub fn to_basis(self) -> BasisSpec {
        match self {
            BasisChoice::Polynomial { degree } => BasisSpec::Polynomial { degree },
            BasisChoice::AsymmetricLogistic => BasisSpec::AsymmetricLogistic,
            BasisChoice::NormalRayleigh => BasisSpec::NormalRayleigh,
        }
    }
}

/// Serializable feature-map selection for the semi-supervised weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZMapChoice {
    Constant,
    Linear,
    Interactions,
}

impl ZMapChoice {
    pub fn to_zmap(self) -> ZMap {
        match self {
            ZMapChoice::Constant => ZMap::Constant,
            ZMapChoice::Linear => ZMap::Linear,
            ZMapChoice::Interactions => ZMap::Interactions,
        }
    }
}

/// How design B combines the covariates in its quadratic term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairConvention {
    /// All ordered pairs: the term is `(sum X_j)^2`.
    #[default]
    AllOrdered,
    /// Unordered pairs including squares: `((sum X)^2 + sum X^2) / 2`.
    UpperTriangle,
    /// Distinct pairs only: `(sum X)^2 - sum X^2`.
    OffDiagonal,
}

impl PairConvention {
    fn quad(self, sum: f64, sum_sq: f64) -> f64 {
        match self {
            PairConvention::AllOrdered => sum * sum,
            PairConvention::UpperTriangle => (sum * sum + sum_sq) / 2.0,
            PairConvention::OffDiagonal => sum * sum - sum_sq,
        }
    }
}

fn default_error() -> ErrorLaw {
    ErrorLaw::Normal
}
fn default_sigma() -> SigmaMode {
    SigmaMode::Constant(0.5)
}
fn default_n() -> usize {
    500
}
fn default_taus() -> Vec<f64> {
    vec![0.05, 0.10, 0.50, 0.90, 0.95]
}
fn default_reps() -> usize {
    500
}
fn default_seed() -> u64 {
    1729
}
fn default_methods() -> Vec<Method> {
    vec![Method::Supervised, Method::Ordinary]
}
fn default_basis() -> BasisChoice {
    BasisChoice::Polynomial { degree: 3 }
}
fn default_zmap() -> ZMapChoice {
    ZMapChoice::Interactions
}
fn default_center_draws() -> usize {
    1_000_000
}
fn default_grad_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    1000
}

/// Full description of a simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: Design,
    #[serde(default = "default_error")]
    pub error: ErrorLaw,
    /// Design A noise scale; ignored by design B.
    #[serde(default = "default_sigma")]
    pub sigma: SigmaMode,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Unlabeled pool sizes for the semi-supervised method; the pools for
    /// different sizes are nested prefixes of one stream.
    #[serde(default)]
    pub n_unlabeled: Vec<usize>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_basis")]
    pub basis: BasisChoice,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_zmap")]
    pub zmap: ZMapChoice,
    #[serde(default)]
    pub oe_kernel: Kernel,
    #[serde(default)]
    pub oe_bandwidths: Option<Vec<f64>>,
    #[serde(default)]
    pub oe_leave_one_out: bool,
    #[serde(default)]
    pub pair_convention: PairConvention,
    /// Clamp negative semi-supervised weights to zero, keeping the
    /// objective convex at the cost of a slightly perturbed weight sum.
    #[serde(default)]
    pub floor_negative_weights: bool,
    /// Monte Carlo draws for the error-extremile centering constant.
    #[serde(default = "default_center_draws")]
    pub center_draws: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl SimConfig {
    /// Reject configurations the harness cannot run.
    pub fn validate(&self) -> Result<()> {
        if self.n < self.design.p() + 1 {
            return Err(ExtremileError::Domain(format!(
                "n = {} is too small for a {}-column design",
                self.n,
                self.design.p()
            )));
        }
        if self.reps == 0 {
            return Err(ExtremileError::Domain("reps must be at least 1".into()));
        }
        if self.taus.is_empty() {
            return Err(ExtremileError::Empty("no extremile orders requested".into()));
        }
        for &tau in &self.taus {
            crate::weight::WeightMeasure::new(tau)?;
        }
        if self.methods.is_empty() {
            return Err(ExtremileError::Empty("no methods requested".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(ExtremileError::Domain(format!("duplicate method {}", m.label())));
            }
        }
        if self.methods.contains(&Method::SemiSupervised) && self.n_unlabeled.is_empty() {
            return Err(ExtremileError::Domain(
                "semi-supervised runs need at least one unlabeled pool size".into(),
            ));
        }
        if self.design == Design::ModelB && self.methods.contains(&Method::OrdinaryKnownCdf) {
            return Err(ExtremileError::Domain(
                "design B has no closed-form conditional law for the known-CDF estimator".into(),
            ));
        }
        if self.center_draws < 100 {
            return Err(ExtremileError::Domain(
                "center_draws must be at least 100 for a usable centering constant".into(),
            ));
        }
        if !(self.grad_tol > 0.0) || self.max_iter == 0 {
            return Err(ExtremileError::Domain(
                "grad_tol must be positive and max_iter at least 1".into(),
            ));
        }
        if let Some(h) = &self.oe_bandwidths {
            if h.iter().any(|&v| !(v > 0.0)) {
                return Err(ExtremileError::Domain("oe_bandwidths must be positive".into()));
            }
        }
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            grid: self.grid,
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            floor_negative_weights: self.floor_negative_weights,
            ..FitOptions::default()
        }
    }
}

fn sha256_seed(text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

/// Deterministic per-replication RNG seed. The canonical string covers the
/// full generating context, so changing any run parameter decorrelates the
/// streams while replications of the same run stay reproducible.
pub fn replication_seed(
    base_seed: u64,
    design: &str,
    error: &str,
    sigma: &str,
    n: usize,
    n_unlabeled_max: usize,
    rep: usize,
) -> [u8; 32] {
    sha256_seed(&format!(
        "{base_seed}/{design}/{error}/{sigma}/n={n}/N={n_unlabeled_max}/rep={rep}"
    ))
}

#[derive(PartialEq, Eq, Hash)]
struct CenterKey {
    error: ErrorLaw,
    tau_bits: u64,
    draws: usize,
    seed: u64,
}

static CENTER_CACHE: OnceLock<Mutex<HashMap<CenterKey, f64>>> = OnceLock::new();

/// The `tau`-extremile `e_tau` of the error law, estimated once from a
/// seeded Monte Carlo sample and cached for the process lifetime.
pub fn error_extremile_center(error: ErrorLaw, tau: f64, draws: usize, seed: u64) -> Result<f64> {
    crate::weight::WeightMeasure::new(tau)?;
    if draws == 0 {
        return Err(ExtremileError::Empty("zero draws for the centering constant".into()));
    }
    let key = CenterKey {
        error,
        tau_bits: tau.to_bits(),
        draws,
        seed,
    };
    let cache = CENTER_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().expect("center cache lock").get(&key) {
        return Ok(v);
    }
    let stream = sha256_seed(&format!(
        "eps-center/{}/{:.17e}/{draws}/{seed}",
        error.label(),
        tau
    ));
    let mut rng = ChaCha12Rng::from_seed(stream);
    let values: Vec<f64> = (0..draws).map(|_| error.sample(&mut rng)).collect();
    let center = sample_extremile(&values, tau)?;
    cache.lock().expect("center cache lock").insert(key, center);
    Ok(center)
}

/// One generated design A replication.
#[derive(Debug, Clone)]
pub struct GeneratedA {
    pub labeled: LabeledData,
    /// Covariate pool (with intercept column) for semi-supervised fits.
    pub unlabeled: Array2<f64>,
    /// True coefficient vector: the conditional extremile is `x' beta0`.
    pub beta0: Array1<f64>,
    /// Noise scale at each labeled observation.
    pub sigmas: Array1<f64>,
}

/// Generate design A. Draw order per labeled row: `X_1`, `X_2`, `eps`;
/// then `X_1`, `X_2` per unlabeled row. `center` must be the extremile
/// `e_tau` of the error law.
pub fn gen_model_a(
    n: usize,
    n_unlabeled: usize,
    error: ErrorLaw,
    sigma: &SigmaMode,
    center: f64,
    rng: &mut ChaCha12Rng,
) -> Result<GeneratedA> {
    let mut x = Array2::ones((n, 3));
    let mut y = Array1::zeros(n);
    let mut sigmas = Array1::zeros(n);
    for i in 0..n {
        let x1 = rng.random::<f64>();
        let x2 = rng.random::<f64>();
        let eps = error.sample(rng);
        let s = sigma.value(x1, x2);
        x[[i, 1]] = x1;
        x[[i, 2]] = x2;
        sigmas[i] = s;
        y[i] = 1.0 + 2.0 * x1 + 3.0 * x2 + s * (eps - center);
    }
    let mut unlabeled = Array2::ones((n_unlabeled, 3));
    for u in 0..n_unlabeled {
        unlabeled[[u, 1]] = rng.random::<f64>();
        unlabeled[[u, 2]] = rng.random::<f64>();
    }
    Ok(GeneratedA {
        labeled: LabeledData::new(x, y)?,
        unlabeled,
        beta0: ndarray::array![1.0, 2.0, 3.0],
        sigmas,
    })
}

/// One generated design B replication.
#[derive(Debug, Clone)]
pub struct GeneratedB {
    pub labeled: LabeledData,
    /// Covariate pool (with intercept column); slices of leading rows give
    /// the nested pools for smaller `N`.
    pub unlabeled: Array2<f64>,
}

/// Generate design B. Draw order per labeled row: `X_1..X_4`, `eps`; then
/// `X_1..X_4` per unlabeled row.
pub fn gen_model_b(
    n: usize,
    n_unlabeled: usize,
    error: ErrorLaw,
    pairs: PairConvention,
    rng: &mut ChaCha12Rng,
) -> Result<GeneratedB> {
    let mut x = Array2::ones((n, 5));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for j in 0..4 {
            let v: f64 = StandardNormal.sample(rng);
            x[[i, 1 + j]] = v;
            sum += v;
            sum_sq += v * v;
        }
        let eps = error.sample(rng);
        y[i] = 1.0 + 0.5 * sum + pairs.quad(sum, sum_sq) + (1.0 + 0.5 * x[[i, 1]] + 0.5 * x[[i, 2]]) * eps;
    }
    let mut unlabeled = Array2::ones((n_unlabeled, 5));
    for u in 0..n_unlabeled {
        for j in 0..4 {
            unlabeled[[u, 1 + j]] = StandardNormal.sample(rng);
        }
    }
    Ok(GeneratedB {
        labeled: LabeledData::new(x, y)?,
        unlabeled,
    })
}

/// Total absolute error `sum_j |estimate_j - truth_j|`.
pub fn tae(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(ExtremileError::Dimension(format!(
            "TAE of a {}-vector against a {}-vector",
            estimate.len(),
            truth.len()
        )));
    }
    Ok(estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// One successful (replication, order, method) estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub tau: f64,
    pub method: Method,
    /// Unlabeled pool size used (0 for methods that use none).
    pub n_unlabeled: usize,
    pub estimate: Vec<f64>,
    /// Total absolute error against the true coefficients, when known.
    pub tae: Option<f64>,
}

/// One failed (replication, order, method) fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub rep: usize,
    pub tau: f64,
    pub method: Method,
    pub n_unlabeled: usize,
    pub message: String,
}

/// Aggregated cell of the summary tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub tau: f64,
    pub method: Method,
    pub n_unlabeled: usize,
    pub reps_used: usize,
    pub failures: usize,
    /// Coordinatewise mean of the estimates (empty if every rep failed).
    pub mean_estimate: Vec<f64>,
    /// Coordinatewise sample standard deviation (needs at least 2 reps).
    pub sd_estimate: Option<Vec<f64>>,
    pub mean_tae: Option<f64>,
    pub sd_tae: Option<f64>,
}

/// Ratio of sampling standard deviations sd(SL) / sd(SSL), one per
/// coordinate, computed over the replications where both fits succeeded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreCell {
    pub tau: f64,
    pub n_unlabeled: usize,
    pub coord: usize,
    pub are: f64,
}

/// Full result of a simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSummary {
    pub schema_version: u32,
    pub config: SimConfig,
    pub cells: Vec<CellSummary>,
    pub ares: Vec<AreCell>,
    pub records: Vec<RepRecord>,
    pub failure_records: Vec<FailureRecord>,
    pub total_failures: usize,
    /// True when some cell lost more than 2% of its replications.
    pub unreliable: bool,
}

struct RepOutcome {
    records: Vec<RepRecord>,
    failures: Vec<FailureRecord>,
}

fn record_fit<T>(
    result: Result<T>,
    rep: usize,
    tau: f64,
    method: Method,
    n_unlabeled: usize,
    failures: &mut Vec<FailureRecord>,
) -> Option<T> {
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            failures.push(FailureRecord {
                rep,
                tau,
                method,
                n_unlabeled,
                message: e.to_string(),
            });
            None
        }
    }
}

fn run_rep_model_a(config: &SimConfig, rep: usize, centers: &HashMap<u64, f64>) -> Result<RepOutcome> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let basis = config.basis.to_basis();
    let opts = config.fit_options();
    let n_max = config.n_unlabeled.iter().copied().max().unwrap_or(0);
    let want_ssl = config.methods.contains(&Method::SemiSupervised);
    let seed = replication_seed(
        config.base_seed,
        config.design.label(),
        config.error.label(),
        &config.sigma.label(),
        config.n,
        n_max,
        rep,
    );
    for &tau in &config.taus {
        let center = centers[&tau.to_bits()];
        // A fresh stream per order reuses the same covariate and error draws;
        // only the centering shift differs across orders.
        let mut rng = ChaCha12Rng::from_seed(seed);
        let gen = gen_model_a(
            config.n,
            if want_ssl { n_max } else { 0 },
            config.error,
            &config.sigma,
            center,
            &mut rng,
        )?;
        let truth: Vec<f64> = gen.beta0.to_vec();
        let mut sl_alpha = None;
        for &method in &config.methods {
            match method {
                Method::Supervised => {
                    if let Some(fit) = record_fit(
                        fit_supervised(&gen.labeled, &basis, &[tau], &opts),
                        rep,
                        tau,
                        method,
                        0,
                        &mut failures,
                    ) {
                        let est = fit.betas.row(0).to_vec();
                        records.push(RepRecord {
                            rep,
                            tau,
                            method,
                            n_unlabeled: 0,
                            tae: Some(tae(&est, &truth)?),
                            estimate: est,
                        });
                        sl_alpha = Some(fit.alpha);
                    }
                }
                Method::SemiSupervised => {
                    for &big_n in &config.n_unlabeled {
                        let pool = UnlabeledData::new(
                            gen.unlabeled.slice(ndarray::s![..big_n, ..]).to_owned(),
                        )?;
                        let mut ssl_opts = opts.clone();
                        if let Some(a) = &sl_alpha {
                            ssl_opts.init = InitStrategy::Warm(a.array().clone());
                        }
                        if let Some(fit) = record_fit(
                            fit_semisupervised(
                                &gen.labeled,
                                &pool,
                                &config.zmap.to_zmap(),
                                &basis,
                                &[tau],
                                &ssl_opts,
                            ),
                            rep,
                            tau,
                            method,
                            big_n,
                            &mut failures,
                        ) {
                            let est = fit.betas.row(0).to_vec();
                            records.push(RepRecord {
                                rep,
                                tau,
                                method,
                                n_unlabeled: big_n,
                                tae: Some(tae(&est, &truth)?),
                                estimate: est,
                            });
                        }
                    }
                }
                Method::Ordinary | Method::OrdinaryKnownCdf => {
                    let oe_opts = OrdinaryOptions {
                        bandwidths: config.oe_bandwidths.clone(),
                        kernel: config.oe_kernel,
                        leave_one_out: config.oe_leave_one_out,
                        cdf: if method == Method::Ordinary {
                            CdfEstimate::NadarayaWatson
                        } else {
                            let error = config.error;
                            let sigma = config.sigma;
                            CdfEstimate::Known(std::sync::Arc::new(move |row, y| {
                                let m = 1.0 + 2.0 * row[1] + 3.0 * row[2];
                                let s = sigma.value(row[1], row[2]);
                                if s == 0.0 {
                                    return if y < m { 0.0 } else { 1.0 };
                                }
                                error.cdf((y - m) / s + center)
                            }))
                        },
                    };
                    if let Some(fit) = record_fit(
                        fit_ordinary(&gen.labeled, tau, &oe_opts),
                        rep,
                        tau,
                        method,
                        0,
                        &mut failures,
                    ) {
                        let est = fit.beta.to_vec();
                        records.push(RepRecord {
                            rep,
                            tau,
                            method,
                            n_unlabeled: 0,
                            tae: Some(tae(&est, &truth)?),
                            estimate: est,
                        });
                    }
                }
            }
        }
    }
    Ok(RepOutcome { records, failures })
}

fn run_rep_model_b(config: &SimConfig, rep: usize) -> Result<RepOutcome> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let basis = config.basis.to_basis();
    let opts = config.fit_options();
    let n_max = config.n_unlabeled.iter().copied().max().unwrap_or(0);
    let seed = replication_seed(
        config.base_seed,
        config.design.label(),
        config.error.label(),
        "none",
        config.n,
        n_max,
        rep,
    );
    let mut rng = ChaCha12Rng::from_seed(seed);
    let gen = gen_model_b(config.n, n_max, config.error, config.pair_convention, &mut rng)?;

    // The data do not depend on the order, so one coefficient-matrix fit
    // serves every requested order.
    let mut sl_alpha = None;
    for &method in &config.methods {
        match method {
            Method::Supervised => {
                if let Some(fit) = record_fit(
                    fit_supervised(&gen.labeled, &basis, &config.taus, &opts),
                    rep,
                    config.taus[0],
                    method,
                    0,
                    &mut failures,
                ) {
                    for (k, &tau) in config.taus.iter().enumerate() {
                        records.push(RepRecord {
                            rep,
                            tau,
                            method,
                            n_unlabeled: 0,
                            estimate: fit.betas.row(k).to_vec(),
                            tae: None,
                        });
                    }
                    sl_alpha = Some(fit.alpha);
                }
            }
            Method::SemiSupervised => {
                for &big_n in &config.n_unlabeled {
                    let pool =
                        UnlabeledData::new(gen.unlabeled.slice(ndarray::s![..big_n, ..]).to_owned())?;
                    let mut ssl_opts = opts.clone();
                    if let Some(a) = &sl_alpha {
                        ssl_opts.init = InitStrategy::Warm(a.array().clone());
                    }
                    if let Some(fit) = record_fit(
                        fit_semisupervised(
                            &gen.labeled,
                            &pool,
                            &config.zmap.to_zmap(),
                            &basis,
                            &config.taus,
                            &ssl_opts,
                        ),
                        rep,
                        config.taus[0],
                        method,
                        big_n,
                        &mut failures,
                    ) {
                        for (k, &tau) in config.taus.iter().enumerate() {
                            records.push(RepRecord {
                                rep,
                                tau,
                                method,
                                n_unlabeled: big_n,
                                estimate: fit.betas.row(k).to_vec(),
                                tae: None,
                            });
                        }
                    }
                }
            }
            Method::Ordinary => {
                for &tau in &config.taus {
                    let oe_opts = OrdinaryOptions {
                        bandwidths: config.oe_bandwidths.clone(),
                        kernel: config.oe_kernel,
                        leave_one_out: config.oe_leave_one_out,
                        cdf: CdfEstimate::NadarayaWatson,
                    };
                    if let Some(fit) = record_fit(
                        fit_ordinary(&gen.labeled, tau, &oe_opts),
                        rep,
                        tau,
                        method,
                        0,
                        &mut failures,
                    ) {
                        records.push(RepRecord {
                            rep,
                            tau,
                            method,
                            n_unlabeled: 0,
                            estimate: fit.beta.to_vec(),
                            tae: None,
                        });
                    }
                }
            }
            Method::OrdinaryKnownCdf => unreachable!("rejected by validate"),
        }
    }
    Ok(RepOutcome { records, failures })
}

fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Run every replication of `config` in parallel and aggregate. The result
/// is identical for any thread count.
pub fn run_replications(config: &SimConfig) -> Result<SimSummary> {
    config.validate()?;

    // Centering constants are computed once, ahead of the parallel loop.
    let mut centers = HashMap::new();
    if config.design == Design::ModelA {
        for &tau in &config.taus {
            centers.insert(
                tau.to_bits(),
                error_extremile_center(config.error, tau, config.center_draws, config.base_seed)?,
            );
        }
    }

    let outcomes: Vec<Result<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| match config.design {
            Design::ModelA => run_rep_model_a(config, rep, &centers),
            Design::ModelB => run_rep_model_b(config, rep),
        })
        .collect();

    let mut records = Vec::new();
    let mut failure_records = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        records.extend(outcome.records);
        failure_records.extend(outcome.failures);
    }

    // Group per cell, keyed by position in the config lists so the summary
    // order is deterministic.
    let tau_idx = |tau: f64| {
        config
            .taus
            .iter()
            .position(|&t| t.to_bits() == tau.to_bits())
            .expect("records only hold configured orders")
    };
    let mut grouped: BTreeMap<(usize, usize, usize), Vec<&RepRecord>> = BTreeMap::new();
    for rec in &records {
        let m_idx = config.methods.iter().position(|m| *m == rec.method).expect("configured method");
        grouped
            .entry((tau_idx(rec.tau), m_idx, rec.n_unlabeled))
            .or_default()
            .push(rec);
    }
    let mut failure_counts: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for f in &failure_records {
        let m_idx = config.methods.iter().position(|m| *m == f.method).expect("configured method");
        // Model B books supervised and semi-supervised failures under the
        // first order because the single fit covers every order.
        let lost_orders = if config.design == Design::ModelB && f.method != Method::Ordinary {
            config.taus.len()
        } else {
            1
        };
        for k in 0..config.taus.len() {
            let applies = if lost_orders == config.taus.len() {
                true
            } else {
                k == tau_idx(f.tau)
            };
            if applies {
                *failure_counts.entry((k, m_idx, f.n_unlabeled)).or_default() += 1;
            }
        }
    }

    let mut cells = Vec::new();
    let mut unreliable = false;
    for (ti, &tau) in config.taus.iter().enumerate() {
        for (mi, &method) in config.methods.iter().enumerate() {
            let pool_sizes: Vec<usize> = if method == Method::SemiSupervised {
                config.n_unlabeled.clone()
            } else {
                vec![0]
            };
            for big_n in pool_sizes {
                let recs = grouped.get(&(ti, mi, big_n)).map(Vec::as_slice).unwrap_or(&[]);
                let failures = failure_counts.get(&(ti, mi, big_n)).copied().unwrap_or(0);
                if failures * 50 > config.reps {
                    unreliable = true;
                }
                let p = recs.first().map(|r| r.estimate.len()).unwrap_or(0);
                let mut mean_estimate = Vec::new();
                let mut sd_estimate = None;
                if p > 0 {
                    let mut sds = Vec::with_capacity(p);
                    for j in 0..p {
                        let col: Vec<f64> = recs.iter().map(|r| r.estimate[j]).collect();
                        let (m, s) = mean_sd(&col);
                        mean_estimate.push(m);
                        if let Some(s) = s {
                            sds.push(s);
                        }
                    }
                    if sds.len() == p {
                        sd_estimate = Some(sds);
                    }
                }
                let taes: Vec<f64> = recs.iter().filter_map(|r| r.tae).collect();
                let (mean_tae, sd_tae) = if taes.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_sd(&taes);
                    (Some(m), s)
                };
                cells.push(CellSummary {
                    tau,
                    method,
                    n_unlabeled: big_n,
                    reps_used: recs.len(),
                    failures,
                    mean_estimate,
                    sd_estimate,
                    mean_tae,
                    sd_tae,
                });
            }
        }
    }

    // ARE: paired sd ratios over the replications where both fits succeeded.
    let mut ares = Vec::new();
    if config.methods.contains(&Method::Supervised) && config.methods.contains(&Method::SemiSupervised) {
        for &tau in &config.taus {
            let ti = tau_idx(tau);
            let sl_by_rep: BTreeMap<usize, &RepRecord> = records
                .iter()
                .filter(|r| r.method == Method::Supervised && tau_idx(r.tau) == ti)
                .map(|r| (r.rep, r))
                .collect();
            for &big_n in &config.n_unlabeled {
                let ssl_by_rep: BTreeMap<usize, &RepRecord> = records
                    .iter()
                    .filter(|r| {
                        r.method == Method::SemiSupervised
                            && r.n_unlabeled == big_n
                            && tau_idx(r.tau) == ti
                    })
                    .map(|r| (r.rep, r))
                    .collect();
                let common: Vec<usize> = sl_by_rep
                    .keys()
                    .filter(|rep| ssl_by_rep.contains_key(rep))
                    .copied()
                    .collect();
                if common.len() < 2 {
                    continue;
                }
                let p = sl_by_rep[&common[0]].estimate.len();
                for coord in 0..p {
                    let sl: Vec<f64> = common.iter().map(|r| sl_by_rep[r].estimate[coord]).collect();
                    let ssl: Vec<f64> = common.iter().map(|r| ssl_by_rep[r].estimate[coord]).collect();
                    let (_, sd_sl) = mean_sd(&sl);
                    let (_, sd_ssl) = mean_sd(&ssl);
                    if let (Some(a), Some(b)) = (sd_sl, sd_ssl) {
                        if b > 0.0 {
                            ares.push(AreCell {
                                tau,
                                n_unlabeled: big_n,
                                coord,
                                are: a / b,
                            });
                        }
                    }
                }
            }
        }
    }

    let total_failures = failure_records.len();
    Ok(SimSummary {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        cells,
        ares,
        records,
        failure_records,
        total_failures,
        unreliable,
    })
}

impl SimSummary {
    /// Plain-text tables: estimation error by order and method, coefficient
    /// means with standard deviations, and sd ratios where available.
    pub fn render_tables(&self) -> String {
        let mut out = String::new();
        let fmt = |mean: f64, sd: Option<f64>| match sd {
            Some(s) => format!("{mean:.3} ({s:.3})"),
            None => format!("{mean:.3} (   --)"),
        };

        if self.cells.iter().any(|c| c.mean_tae.is_some()) {
            out.push_str("total absolute error, mean (sd) over replications\n");
            let mut headers = vec!["tau".to_string()];
            let mut columns: Vec<(Method, usize)> = Vec::new();
            for c in &self.cells {
                if c.mean_tae.is_some() && !columns.contains(&(c.method, c.n_unlabeled)) {
                    columns.push((c.method, c.n_unlabeled));
                }
            }
            for (m, n_u) in &columns {
                if *m == Method::SemiSupervised {
                    headers.push(format!("{} N={}", m.label(), n_u));
                } else {
                    headers.push(m.label().to_string());
                }
            }
            out.push_str(&format!("{:<8}", headers[0]));
            for h in &headers[1..] {
                out.push_str(&format!("{h:<18}"));
            }
            out.push('\n');
            for &tau in &self.config.taus {
                out.push_str(&format!("{tau:<8.3}"));
                for (m, n_u) in &columns {
                    let cell = self
                        .cells
                        .iter()
                        .find(|c| c.tau == tau && c.method == *m && c.n_unlabeled == *n_u);
                    match cell.and_then(|c| c.mean_tae.map(|v| (v, c.sd_tae))) {
                        Some((v, sd)) => out.push_str(&format!("{:<18}", fmt(v, sd))),
                        None => out.push_str(&format!("{:<18}", "--")),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }

        if self.cells.iter().any(|c| c.mean_tae.is_none() && !c.mean_estimate.is_empty()) {
            out.push_str("coefficient estimates, mean (sd) over replications\n");
            for &tau in &self.config.taus {
                out.push_str(&format!("tau = {tau:.3}\n"));
                let cells: Vec<&CellSummary> = self
                    .cells
                    .iter()
                    .filter(|c| c.tau == tau && !c.mean_estimate.is_empty())
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                out.push_str(&format!("{:<8}", "coef"));
                for c in &cells {
                    let label = if c.method == Method::SemiSupervised {
                        format!("{} N={}", c.method.label(), c.n_unlabeled)
                    } else {
                        c.method.label().to_string()
                    };
                    out.push_str(&format!("{label:<18}"));
                }
                out.push('\n');
                let p = cells.iter().map(|c| c.mean_estimate.len()).max().unwrap_or(0);
                for j in 0..p {
                    out.push_str(&format!("b{j:<7}"));
                    for c in &cells {
                        if j < c.mean_estimate.len() {
                            let sd = c.sd_estimate.as_ref().map(|s| s[j]);
                            out.push_str(&format!("{:<18}", fmt(c.mean_estimate[j], sd)));
                        } else {
                            out.push_str(&format!("{:<18}", "--"));
                        }
                    }
                    out.push('\n');
                }
            }
            out.push('\n');
        }

        if !self.ares.is_empty() {
            out.push_str("sd ratio sd(sl) / sd(ssl) by coordinate\n");
            out.push_str(&format!("{:<8}{:<8}", "tau", "N"));
            let p = self.ares.iter().map(|a| a.coord).max().unwrap_or(0) + 1;
            for j in 0..p {
                out.push_str(&format!("b{j:<9}"));
            }
            out.push('\n');
            for &tau in &self.config.taus {
                for &big_n in &self.config.n_unlabeled {
                    let row: Vec<&AreCell> = self
                        .ares
                        .iter()
                        .filter(|a| a.tau == tau && a.n_unlabeled == big_n)
                        .collect();
                    if row.is_empty() {
                        continue;
                    }
                    out.push_str(&format!("{tau:<8.3}{big_n:<8}"));
                    for j in 0..p {
                        match row.iter().find(|a| a.coord == j) {
                            Some(a) => out.push_str(&format!("{:<10.3}", a.are)),
                            None => out.push_str(&format!("{:<10}", "--")),
                        }
                    }
                    out.push('\n');
                }
            }
        }
        if self.unreliable {
            out.push_str("\nwarning: more than 2% of replications failed in at least one cell\n");
        }
        out
    }
}
