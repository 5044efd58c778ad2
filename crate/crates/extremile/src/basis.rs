//! Quantile-function bases `b(t)` and their `J_tau`-moments.
//!
//! The working model writes the conditional quantile function as
//! `q(t | x) = x' alpha b(t)`, so the basis fixes which quantile shapes the
//! model can express. Every built-in basis has `b_1(t) = 1`, which makes the
//! first coefficient column an intercept curve and gives the moment identity
//! `m_1(tau) = integral J_tau = 1`. Bases whose components blow up at 0 or 1
//! (logarithms, normal quantile) are integrated on a grid clipped to
//! `[delta, 1 - delta]`.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{ExtremileError, Result};
use crate::quad::IntegrationRule;
use crate::weight::WeightMeasure;

/// Default clip width for bases that are unbounded at the interval ends.
pub const DEFAULT_CLIP_DELTA: f64 = 1e-4;

/// Shared function type for user-defined bases: fill `out` with
/// `b_1(t), ..., b_q(t)`.
pub type BasisFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// A basis for the quantile-function model, with its derivative.
#[derive(Clone)]
pub enum BasisSpec {
    /// `1, t, t^2, ..., t^degree`; bounded on `[0, 1]`.
    Polynomial { degree: usize },
    /// `1, log t, -log(1 - t)`; unbounded at both ends.
    AsymmetricLogistic,
    /// `1, Phi^{-1}(t), sqrt(-2 log(1 - t))`: a normal left tail and a
    /// Rayleigh right tail; unbounded at both ends.
    NormalRayleigh,
    /// User-supplied component and derivative evaluators.
    Custom {
        name: String,
        len: usize,
        eval: BasisFn,
        deriv: BasisFn,
        /// Whether every component stays bounded on the closed interval;
        /// drives endpoint clipping.
        bounded: bool,
    },
}

impl fmt::Debug for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BasisSpec({})", self.name())
    }
}

impl BasisSpec {
    /// Cubic polynomial basis, the package default.
    pub fn default_polynomial() -> Self {
        BasisSpec::Polynomial { degree: 3 }
    }

    /// Short display name.
    pub fn name(&self) -> String {
        match self {
            BasisSpec::Polynomial { degree } => format!("polynomial({degree})"),
            BasisSpec::AsymmetricLogistic => "asymmetric-logistic".into(),
            BasisSpec::NormalRayleigh => "normal-rayleigh".into(),
            BasisSpec::Custom { name, .. } => name.clone(),
        }
    }

    /// Number of components `q`.
    pub fn len(&self) -> usize {
        match self {
            BasisSpec::Polynomial { degree } => degree + 1,
            BasisSpec::AsymmetricLogistic | BasisSpec::NormalRayleigh => 3,
            BasisSpec::Custom { len, .. } => *len,
        }
    }

    /// True when the basis has no components (only possible for `Custom`).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether all components are bounded on the closed interval.
    pub fn endpoint_bounded(&self) -> bool {
        match self {
            BasisSpec::Polynomial { .. } => true,
            BasisSpec::AsymmetricLogistic | BasisSpec::NormalRayleigh => false,
            BasisSpec::Custom { bounded, .. } => *bounded,
        }
    }

    /// Evaluate `b(t)` into `out`; `t` must lie in `(0, 1)` for unbounded
    /// bases and `[0, 1]` for bounded ones.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self {
            BasisSpec::Polynomial { .. } => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= t;
                }
            }
            BasisSpec::AsymmetricLogistic => {
                out[0] = 1.0;
                out[1] = t.ln();
                out[2] = -(1.0 - t).ln();
            }
            BasisSpec::NormalRayleigh => {
                out[0] = 1.0;
                out[1] = normal_quantile(t);
                out[2] = (-2.0 * (1.0 - t).ln()).sqrt();
            }
            BasisSpec::Custom { eval, .. } => eval(t, out),
        }
    }

    /// Evaluate the derivative `db/dt` into `out`.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self {
            BasisSpec::Polynomial { .. } => {
                out[0] = 0.0;
                let mut p = 1.0;
                for (k, o) in out.iter_mut().enumerate().skip(1) {
                    *o = k as f64 * p;
                    p *= t;
                }
            }
            BasisSpec::AsymmetricLogistic => {
                out[0] = 0.0;
                out[1] = 1.0 / t;
                out[2] = 1.0 / (1.0 - t);
            }
            BasisSpec::NormalRayleigh => {
                out[0] = 0.0;
                // d/dt Phi^{-1}(t) = 1 / phi(Phi^{-1}(t)).
                let z = normal_quantile(t);
                out[1] = (0.5 * z * z).exp() * (2.0 * std::f64::consts::PI).sqrt();
                let ray = (-2.0 * (1.0 - t).ln()).sqrt();
                out[2] = if ray > 0.0 { 1.0 / ((1.0 - t) * ray) } else { 0.0 };
            }
            BasisSpec::Custom { deriv, .. } => deriv(t, out),
        }
    }

    /// Evaluate `b(t)` as a fresh vector.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out);
        out
    }

    /// `b` on all nodes of a rule as a `(nodes, q)` matrix, with the rule
    /// clipped first when the basis needs it.
    pub fn eval_on(&self, rule: &IntegrationRule) -> Result<(Array2<f64>, IntegrationRule)> {
        let rule = self.working_rule(rule)?;
        let q = self.len();
        let mut mat = Array2::zeros((rule.len(), q));
        for (g, &t) in rule.nodes().iter().enumerate() {
            self.eval_into(t, mat.row_mut(g).as_slice_mut().expect("row contiguous"));
        }
        for (g, row) in mat.rows().into_iter().enumerate() {
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                return Err(ExtremileError::NonFinite(format!(
                    "basis {} component {} is not finite at node t = {}",
                    self.name(),
                    k + 1,
                    rule.nodes()[g]
                )));
            }
        }
        Ok((mat, rule))
    }

    /// The rule this basis integrates on: clipped into the interior when any
    /// component is endpoint-unbounded.
    pub fn working_rule(&self, rule: &IntegrationRule) -> Result<IntegrationRule> {
        if self.endpoint_bounded() {
            Ok(rule.clone())
        } else {
            rule.clipped(DEFAULT_CLIP_DELTA)
        }
    }
}

/// Moment vector `m(tau) = integral of b(t) J_tau(t) dt`, the bridge from
/// fitted quantile coefficients to the extremile coefficient
/// `beta_tau = alpha m(tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    tau: f64,
    values: Array1<f64>,
    grid_size: usize,
}

impl MomentVector {
    /// The order the moments were computed for.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// The moments as a `q`-vector.
    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    /// Node count of the rule used for the integral.
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }
}

/// Integrate `b(t) J_tau(t)` componentwise over `rule`.
pub fn basis_moment(basis: &BasisSpec, tau: f64, rule: &IntegrationRule) -> Result<MomentVector> {
    if basis.is_empty() {
        return Err(ExtremileError::Empty("basis with zero components".into()));
    }
    let measure = WeightMeasure::new(tau)?;
    let (bmat, rule) = basis.eval_on(rule)?;
    let q = basis.len();
    let mut values = Array1::zeros(q);
    for (g, &t) in rule.nodes().iter().enumerate() {
        let jw = measure.j(t)? * rule.weights()[g];
        for k in 0..q {
            values[k] += jw * bmat[[g, k]];
        }
    }
    Ok(MomentVector {
        tau,
        values,
        grid_size: rule.len(),
    })
}

/// Standard normal quantile function (Acklam's rational approximation with
/// one Halley refinement step; absolute error well under 1e-12 on (0, 1)).
pub(crate) fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley step against the exact CDF tightens to near machine accuracy.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Standard normal CDF via the complementary error function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, Cody's rational Chebyshev approximation
/// (the SPECFUN `calerf` kernel); relative error below ~1e-15.
pub(crate) fn erfc(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    const C: [f64; 9] = [
        5.64188496988670089e-1,
        8.88314979438837594e0,
        6.61191906371416295e1,
        2.98635138197400131e2,
        8.81952221241769090e2,
        1.71204761263407058e3,
        2.05107837782607147e3,
        1.23033935479799725e3,
        2.15311535474403846e-8,
    ];
    const D: [f64; 8] = [
        1.57449261107098347e1,
        1.17693950891312499e2,
        5.37181101862009858e2,
        1.62138957456669019e3,
        3.29079923573345963e3,
        4.36261909014324716e3,
        3.43936767414372164e3,
        1.23033935480374942e3,
    ];
    const P: [f64; 6] = [
        3.05326634961232344e-1,
        3.60344899949804439e-1,
        1.25781726111229246e-1,
        1.60837851487422766e-2,
        6.58749161529837803e-4,
        1.63153871373020978e-2,
    ];
    const Q: [f64; 5] = [
        2.56852019228982242e0,
        1.87295284992346047e0,
        5.27905102951428412e-1,
        6.05183413124413191e-2,
        2.33520497626869185e-3,
    ];
    const SQRPI: f64 = 5.6418958354775628695e-1;

    let y = x.abs();
    let result = if y <= 0.46875 {
        // erfc = 1 - erf on the central interval.
        let z = y * y;
        let mut num = A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + A[i]) * z;
            den = (den + B[i]) * z;
        }
        return 1.0 - x * (num + A[3]) / (den + B[3]);
    } else if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        let frac = (num + C[7]) / (den + D[7]);
        scaled_exp_mul(y, frac)
    } else if y < 26.6 {
        let z = 1.0 / (y * y);
        let mut num = P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + P[i]) * z;
            den = (den + Q[i]) * z;
        }
        let frac = (SQRPI - z * (num + P[4]) / (den + Q[4])) / y;
        scaled_exp_mul(y, frac)
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// `exp(-y^2) * frac` with the squared term split so no precision is lost
/// forming `y^2` for large `y`.
fn scaled_exp_mul(y: f64, frac: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp() * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::IntegrationRule;
    use approx::assert_abs_diff_eq;

    fn rule99() -> IntegrationRule {
        IntegrationRule::gauss_legendre(99).unwrap()
    }

    #[test]
    fn polynomial_basis_evaluates_powers() {
        let b = BasisSpec::Polynomial { degree: 3 };
        assert_eq!(b.len(), 4);
        assert_eq!(b.eval(0.5), vec![1.0, 0.5, 0.25, 0.125]);
        let mut d = vec![0.0; 4];
        b.deriv_into(0.5, &mut d);
        assert_eq!(d, vec![0.0, 1.0, 1.0, 0.75]);
    }

    #[test]
    fn first_component_is_one_for_all_builtins() {
        for b in [
            BasisSpec::Polynomial { degree: 2 },
            BasisSpec::AsymmetricLogistic,
            BasisSpec::NormalRayleigh,
        ] {
            for t in [0.01, 0.3, 0.77, 0.99] {
                assert_eq!(b.eval(t)[0], 1.0);
            }
        }
    }

    #[test]
    fn moment_vector_at_median_matches_plain_moments() {
        // J_{1/2} = 1, so m_k = 1/(k+1) for the polynomial basis.
        let m = basis_moment(&BasisSpec::Polynomial { degree: 3 }, 0.5, &rule99()).unwrap();
        let expected = [1.0, 0.5, 1.0 / 3.0, 0.25];
        for (got, want) in m.values().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn moment_vector_upper_tail_matches_closed_form() {
        // For tau >= 1/2 and b_k = t^k: m_k = r / (r + k).
        let m = basis_moment(&BasisSpec::Polynomial { degree: 3 }, 0.9, &rule99()).unwrap();
        let r = 0.5f64.ln() / 0.9f64.ln();
        let expected = [
            1.0,
            0.8680532245877164,
            0.7668675272046687,
            0.6868088091923535,
        ];
        for (k, (got, want)) in m.values().iter().zip(expected).enumerate() {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
            assert_abs_diff_eq!(*got, r / (r + k as f64), epsilon = 1e-9);
        }
    }

    #[test]
    fn first_moment_is_one_for_every_basis_and_tau() {
        // Bounded bases integrate J on the full interval (GL-99 error at most
        // 4e-6, see the weight-module test); clipped bases lose the measure
        // mass outside [delta, 1-delta], at most ~s*delta = 1.4e-3 for the
        // extreme taus here.
        for tau in [0.05, 0.3, 0.5, 0.8, 0.95] {
            let m = basis_moment(&BasisSpec::Polynomial { degree: 4 }, tau, &rule99()).unwrap();
            assert_abs_diff_eq!(m.values()[0], 1.0, epsilon = 4e-6);
        }
        for basis in [BasisSpec::AsymmetricLogistic, BasisSpec::NormalRayleigh] {
            for tau in [0.05, 0.3, 0.5, 0.8, 0.95] {
                let m = basis_moment(&basis, tau, &rule99()).unwrap();
                assert_abs_diff_eq!(m.values()[0], 1.0, epsilon = 2.5e-3);
            }
        }
    }

    #[test]
    fn unbounded_bases_are_clipped_not_infinite() {
        // The uniform rule includes t = 1 where log(1-t) blows up; clipping
        // must keep evaluation finite.
        let rule = IntegrationRule::uniform(200).unwrap();
        for basis in [BasisSpec::AsymmetricLogistic, BasisSpec::NormalRayleigh] {
            let m = basis_moment(&basis, 0.9, &rule).unwrap();
            assert!(m.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn custom_basis_reporting_non_finite_values_errors_with_node() {
        let eval: BasisFn = Arc::new(|t, out: &mut [f64]| {
            out[0] = 1.0;
            out[1] = if t > 0.5 { f64::NAN } else { t };
        });
        let deriv: BasisFn = Arc::new(|_, out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 1.0;
        });
        let basis = BasisSpec::Custom {
            name: "broken".into(),
            len: 2,
            eval,
            deriv,
            bounded: true,
        };
        let err = basis_moment(&basis, 0.5, &rule99()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("component 2"), "message was: {msg}");
    }

    #[test]
    fn normal_quantile_matches_known_values() {
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.84134474606854293), 1.0, epsilon = 1e-7);
        for p in [1e-4, 0.01, 0.3, 0.5, 0.9, 0.9999] {
            assert_abs_diff_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_rayleigh_derivative_matches_finite_differences() {
        let b = BasisSpec::NormalRayleigh;
        let d = 1e-6;
        for t in [0.1, 0.4, 0.6, 0.9] {
            let up = b.eval(t + d);
            let dn = b.eval(t - d);
            let mut grad = vec![0.0; 3];
            b.deriv_into(t, &mut grad);
            for k in 0..3 {
                let fd = (up[k] - dn[k]) / (2.0 * d);
                assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-4 * (1.0 + fd.abs()));
            }
        }
    }
}
