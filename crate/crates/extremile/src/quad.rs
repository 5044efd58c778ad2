//! Integration rules on the unit interval.
//!
//! Everything downstream (moment vectors, the integrated check loss, the
//! sandwich pieces) integrates smooth functions of `t` over `(0, 1)`. The
//! default rule is Gauss-Legendre with 99 nodes, whose nodes are strictly
//! interior; a uniform mid-grid `i/n` is kept as a fallback matching the
//! plain Riemann form `n^{-1} sum b(i/n) J(i/n)`.

use serde::{Deserialize, Serialize};

use crate::error::{ExtremileError, Result};

/// Serializable description of an integration rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSpec {
    /// Gauss-Legendre with the given node count, mapped onto (0, 1).
    GaussLegendre(usize),
    /// Nodes `i/n` for `i = 1..=n`, each with weight `1/n`.
    Uniform(usize),
}

impl GridSpec {
    /// Number of nodes the rule will have.
    pub fn len(&self) -> usize {
        match *self {
            GridSpec::GaussLegendre(n) | GridSpec::Uniform(n) => n,
        }
    }

    /// True when the rule has no nodes.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::GaussLegendre(99)
    }
}

/// Nodes and weights of a quadrature rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct IntegrationRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    spec: GridSpec,
}

impl IntegrationRule {
    /// Build the rule described by `spec`.
    pub fn from_spec(spec: GridSpec) -> Result<Self> {
        match spec {
            GridSpec::GaussLegendre(n) => Self::gauss_legendre(n),
            GridSpec::Uniform(n) => Self::uniform(n),
        }
    }

    /// Gauss-Legendre rule with `n` nodes mapped affinely onto (0, 1).
    pub fn gauss_legendre(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(ExtremileError::Empty("quadrature rule with 0 nodes".into()));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        // Roots come in +/- pairs on [-1, 1]; compute one half by Newton
        // iteration on P_n and mirror so symmetry is exact in floating point.
        for k in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_deriv(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-15 {
                    let (_, d) = legendre_with_deriv(n, x);
                    dp = d;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // x is the k-th root from the +1 end; mirror to the -1 end.
            nodes[n - 1 - k] = x;
            nodes[k] = -x;
            weights[k] = w;
            weights[n - 1 - k] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
            let (_, d) = legendre_with_deriv(n, 0.0);
            weights[n / 2] = 2.0 / (d * d);
        }
        // Map [-1, 1] -> [0, 1]: t = (x + 1)/2, weights halve.
        for k in 0..n {
            nodes[k] = 0.5 * (nodes[k] + 1.0);
            weights[k] *= 0.5;
        }
        Ok(Self {
            nodes,
            weights,
            spec: GridSpec::GaussLegendre(n),
        })
    }

    /// Uniform rule with nodes `i/n`, `i = 1..=n`, and weights `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(ExtremileError::Empty("quadrature rule with 0 nodes".into()));
        }
        let nodes = (1..=n).map(|i| i as f64 / n as f64).collect();
        let weights = vec![1.0 / n as f64; n];
        Ok(Self {
            nodes,
            weights,
            spec: GridSpec::Uniform(n),
        })
    }

    /// Same rule squeezed affinely onto `[delta, 1 - delta]`.
    ///
    /// Used for bases that are unbounded at the interval ends; `delta` must
    /// lie in `[0, 1/2)`.
    pub fn clipped(&self, delta: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&delta) {
            return Err(ExtremileError::Domain(format!(
                "clip delta {delta} outside [0, 0.5)"
            )));
        }
        let scale = 1.0 - 2.0 * delta;
        Ok(Self {
            nodes: self.nodes.iter().map(|t| delta + scale * t).collect(),
            weights: self.weights.iter().map(|w| scale * w).collect(),
            spec: self.spec,
        })
    }

    /// Quadrature nodes, ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights aligned with [`Self::nodes`].
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The spec this rule was built from.
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    /// Node count.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when the rule has no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate a scalar function over the rule.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }
}

/// Legendre polynomial `P_n` and its derivative at `x` by recurrence.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1); x is interior so safe.
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gl_weights_sum_to_one() {
        for n in [1, 2, 3, 10, 49, 99, 199] {
            let rule = IntegrationRule::gauss_legendre(n).unwrap();
            let total: f64 = rule.weights().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-13);
            assert!(rule.nodes().windows(2).all(|w| w[0] < w[1]));
            assert!(rule.nodes().iter().all(|&t| t > 0.0 && t < 1.0));
        }
    }

    #[test]
    fn gl_integrates_polynomials_exactly() {
        // Degree up to 2n-1 is exact; check a few moments at n = 5.
        let rule = IntegrationRule::gauss_legendre(5).unwrap();
        for k in 0..10 {
            let got = rule.integrate(|t| t.powi(k));
            assert_abs_diff_eq!(got, 1.0 / (k as f64 + 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn gl_matches_known_three_point_rule() {
        // On [0,1]: nodes (1 -/+ sqrt(3/5))/2 and 1/2, weights 5/18, 8/18, 5/18.
        let rule = IntegrationRule::gauss_legendre(3).unwrap();
        let s = (0.6f64).sqrt();
        assert_abs_diff_eq!(rule.nodes()[0], 0.5 * (1.0 - s), epsilon = 1e-14);
        assert_abs_diff_eq!(rule.nodes()[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.nodes()[2], 0.5 * (1.0 + s), epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights()[0], 5.0 / 18.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights()[1], 8.0 / 18.0, epsilon = 1e-14);
    }

    #[test]
    fn uniform_rule_is_right_endpoint_grid() {
        let rule = IntegrationRule::uniform(4).unwrap();
        assert_eq!(rule.nodes(), &[0.25, 0.5, 0.75, 1.0]);
        assert!(rule.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn clipping_rescales_into_interior() {
        let rule = IntegrationRule::gauss_legendre(9).unwrap();
        let clipped = rule.clipped(1e-4).unwrap();
        assert!(clipped.nodes().iter().all(|&t| (1e-4..=0.9999).contains(&t)));
        let total: f64 = clipped.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0 - 2e-4, epsilon = 1e-12);
        assert!(rule.clipped(0.5).is_err());
    }

    #[test]
    fn zero_nodes_is_an_error() {
        assert!(IntegrationRule::gauss_legendre(0).is_err());
        assert!(IntegrationRule::uniform(0).is_err());
    }
}
