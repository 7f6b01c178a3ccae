//! Beta outcome law and its maximum-likelihood fit.

use serde::{Deserialize, Serialize};

use super::special::{digamma, ln_gamma, trigamma};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaLaw {
    pub shape1: f64,
    pub shape2: f64,
}

impl BetaLaw {
    pub fn new(shape1: f64, shape2: f64) -> Result<Self> {
        if !(shape1 > 0.0 && shape2 > 0.0) || !shape1.is_finite() || !shape2.is_finite() {
            return Err(Error::domain(format!("beta shapes must be positive, got ({shape1}, {shape2})")));
        }
        Ok(BetaLaw { shape1, shape2 })
    }

    pub fn mean(&self) -> f64 {
        self.shape1 / (self.shape1 + self.shape2)
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        if !(y > 0.0 && y < 1.0) {
            return f64::NEG_INFINITY;
        }
        let (a, b) = (self.shape1, self.shape2);
        (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln() - ln_beta(a, b)
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.ln_pdf(y).exp()
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaFit {
    pub law: BetaLaw,
    pub converged: bool,
    pub iterations: usize,
    /// Euclidean norm of the per-observation score at exit.
    pub gradient_norm: f64,
}

/// Method-of-moments shapes for a given mean and variance.
pub fn beta_moment_start(mean: f64, var: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && mean < 1.0) || !(var > 0.0) {
        return Err(Error::domain(format!("no beta law with mean {mean} and variance {var}")));
    }
    let common = mean * (1.0 - mean) / var - 1.0;
    if common <= 0.0 {
        return Err(Error::domain("variance too large for a beta law"));
    }
    Ok((mean * common, (1.0 - mean) * common))
}

/// Newton iterations on the two-parameter log-likelihood from the moment
/// start, stopping once the per-observation score norm drops below 1e-8.
pub fn fit_beta_mle(samples: &[f64]) -> Result<BetaFit> {
    if samples.len() < 10 {
        return Err(Error::domain(format!("need at least 10 samples, got {}", samples.len())));
    }
    if let Some(bad) = samples.iter().find(|y| !(**y > 0.0 && **y < 1.0)) {
        return Err(Error::domain(format!("beta samples must lie strictly inside (0, 1), found {bad}")));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_log = samples.iter().map(|y| y.ln()).sum::<f64>() / n;
    let mean_log1m = samples.iter().map(|y| (1.0 - y).ln()).sum::<f64>() / n;

    let (mut a, mut b) = beta_moment_start(mean, var).unwrap_or((1.0, 1.0));
    let grad = |a: f64, b: f64| {
        let s = digamma(a + b);
        (s - digamma(a) + mean_log, s - digamma(b) + mean_log1m)
    };
    let loglik = |a: f64, b: f64| (a - 1.0) * mean_log + (b - 1.0) * mean_log1m - ln_beta(a, b);

    for it in 0..100 {
        let (g1, g2) = grad(a, b);
        let norm = g1.hypot(g2);
        if norm < 1e-8 {
            return Ok(BetaFit { law: BetaLaw::new(a, b)?, converged: true, iterations: it, gradient_norm: norm });
        }
        let t = trigamma(a + b);
        let (h11, h12, h22) = (t - trigamma(a), t, t - trigamma(b));
        let det = h11 * h22 - h12 * h12;
        // Newton step: -H^{-1} g
        let mut d1 = -(h22 * g1 - h12 * g2) / det;
        let mut d2 = -(-h12 * g1 + h11 * g2) / det;
        let base = loglik(a, b);
        let mut halvings = 0;
        while (a + d1 <= 0.0 || b + d2 <= 0.0 || loglik(a + d1, b + d2) < base - 1e-15) && halvings < 30 {
            d1 *= 0.5;
            d2 *= 0.5;
            halvings += 1;
        }
        a += d1;
        b += d2;
    }
    let (g1, g2) = grad(a, b);
    Ok(BetaFit { law: BetaLaw::new(a, b)?, converged: g1.hypot(g2) < 1e-8, iterations: 100, gradient_norm: g1.hypot(g2) })
}
