//! Gauss rules (Hermite, generalized Laguerre, Legendre) built by
//! Golub-Welsch and polished by Newton steps on the orthonormal recurrence,
//! plus expectation helpers for the outcome and gamma laws.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::beta::BetaLaw;
use super::special::ln_gamma;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuadratureKind {
    /// Weight `exp(-x^2)` on the real line.
    GaussHermite,
    /// Weight `x^alpha exp(-x)` on `(0, inf)`.
    GeneralizedGaussLaguerre { alpha: f64 },
    /// Unit weight on `[-1, 1]`.
    GaussLegendre,
}

impl QuadratureKind {
    /// Diagonal `a_k` and off-diagonal `b_k` of the Jacobi matrix.
    fn recurrence(self, k: usize) -> (f64, f64) {
        let kf = k as f64;
        if k == 0 {
            let a0 = match self {
                QuadratureKind::GeneralizedGaussLaguerre { alpha } => alpha + 1.0,
                _ => 0.0,
            };
            return (a0, 0.0);
        }
        match self {
            QuadratureKind::GaussHermite => (0.0, (kf / 2.0).sqrt()),
            QuadratureKind::GeneralizedGaussLaguerre { alpha } => (2.0 * kf + alpha + 1.0, (kf * (kf + alpha)).sqrt()),
            QuadratureKind::GaussLegendre => (0.0, kf / (4.0 * kf * kf - 1.0).sqrt()),
        }
    }

    fn total_mass(self) -> f64 {
        match self {
            QuadratureKind::GaussHermite => std::f64::consts::PI.sqrt(),
            QuadratureKind::GeneralizedGaussLaguerre { alpha } => ln_gamma(alpha + 1.0).exp(),
            QuadratureKind::GaussLegendre => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(kind: QuadratureKind, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!("quadrature needs at least 2 nodes, got {n}")));
        }
        if let QuadratureKind::GeneralizedGaussLaguerre { alpha } = kind {
            if !(alpha > -1.0) || !alpha.is_finite() {
                return Err(Error::domain(format!("Laguerre parameter must exceed -1, got {alpha}")));
            }
        }
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                kind.recurrence(i).0
            } else if i + 1 == j {
                kind.recurrence(j).1
            } else if j + 1 == i {
                kind.recurrence(i).1
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));
        let mu0 = kind.total_mass();
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (pn, dpn, _) = orthonormal(kind, n, *x, mu0);
                if dpn != 0.0 && dpn.is_finite() {
                    let step = pn / dpn;
                    if step.is_finite() {
                        *x -= step;
                    }
                }
            }
            let (_, _, sumsq) = orthonormal(kind, n, *x, mu0);
            weights.push(1.0 / sumsq);
        }
        Ok(QuadratureRule { kind, nodes, weights })
    }

    pub fn gauss_hermite(n: usize) -> Result<Self> {
        Self::new(QuadratureKind::GaussHermite, n)
    }

    pub fn gauss_laguerre(n: usize, alpha: f64) -> Result<Self> {
        Self::new(QuadratureKind::GeneralizedGaussLaguerre { alpha }, n)
    }

    pub fn gauss_legendre(n: usize) -> Result<Self> {
        Self::new(QuadratureKind::GaussLegendre, n)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_i w_i f(x_i)`, i.e. the integral of `f` against the rule's weight function.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Nodes and probability weights for `E f(Z)`, `Z ~ N(0, 1)`.
    pub fn standard_normal(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.kind != QuadratureKind::GaussHermite {
            return Err(Error::config("standard-normal expectation needs a Gauss-Hermite rule"));
        }
        let s = std::f64::consts::PI.sqrt();
        Ok((
            self.nodes.iter().map(|x| x * std::f64::consts::SQRT_2).collect(),
            self.weights.iter().map(|w| w / s).collect(),
        ))
    }

    /// Nodes and probability weights for `E g(G)`, `G ~ Gamma(alpha + 1, rate 1)`.
    pub fn standard_gamma(&self) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let QuadratureKind::GeneralizedGaussLaguerre { alpha } = self.kind else {
            return Err(Error::config("gamma expectation needs a generalized Gauss-Laguerre rule"));
        };
        let norm = ln_gamma(alpha + 1.0).exp();
        Ok((alpha + 1.0, self.nodes.clone(), self.weights.iter().map(|w| w / norm).collect()))
    }
}

/// Returns `(p_n(x), p_n'(x), sum_{k<n} p_k(x)^2)` for the orthonormal family.
fn orthonormal(kind: QuadratureKind, n: usize, x: f64, mu0: f64) -> (f64, f64, f64) {
    let mut p_prev = 0.0;
    let mut p = 1.0 / mu0.sqrt();
    let mut d_prev = 0.0;
    let mut d = 0.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += p * p;
        let (a, b) = kind.recurrence(k);
        let (_, b_next) = kind.recurrence(k + 1);
        let p_next = ((x - a) * p - b * p_prev) / b_next;
        let d_next = ((x - a) * d + p - b * d_prev) / b_next;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
    (p, d, sumsq)
}

/// Outcome laws the estimators integrate against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeLaw {
    Gaussian { mean: f64, sd: f64 },
    Beta(BetaLaw),
}

/// `E[f(Y)]` under the outcome law, via Hermite (gaussian) or Legendre on (0, 1) (beta).
pub fn expect_outcome(law: &OutcomeLaw, f: impl Fn(f64) -> f64, rule: &QuadratureRule) -> Result<f64> {
    match (law, rule.kind) {
        (OutcomeLaw::Gaussian { mean, sd }, QuadratureKind::GaussHermite) => {
            if !(*sd >= 0.0) {
                return Err(Error::domain("outcome sd must be nonnegative"));
            }
            let (z, w) = rule.standard_normal()?;
            Ok(z.iter().zip(&w).map(|(z, w)| w * f(mean + sd * z)).sum())
        }
        (OutcomeLaw::Beta(b), QuadratureKind::GaussLegendre) => Ok(rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&x, &w)| {
                let y = 0.5 * (x + 1.0);
                0.5 * w * b.pdf(y) * f(y)
            })
            .sum()),
        _ => Err(Error::config(format!("quadrature rule {:?} does not match the outcome law", rule.kind))),
    }
}

/// `E[g(L)]` for `L ~ Gamma(shape, rate)`; the rule must be generalized
/// Gauss-Laguerre with parameter `shape - 1`.
pub fn expect_gamma(shape: f64, rate: f64, g: impl Fn(f64) -> f64, rule: &QuadratureRule) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) {
        return Err(Error::domain(format!("gamma parameters must be positive (shape {shape}, rate {rate})")));
    }
    let (rule_shape, nodes, weights) = rule.standard_gamma()?;
    if (rule_shape - shape).abs() > 1e-12 * shape.max(1.0) {
        return Err(Error::config(format!(
            "Laguerre rule built for shape {rule_shape}, asked to integrate shape {shape}"
        )));
    }
    Ok(nodes.iter().zip(&weights).map(|(&x, &w)| w * g(x / rate)).sum())
}
