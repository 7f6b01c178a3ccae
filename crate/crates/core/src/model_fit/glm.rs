//! Generalized linear models fitted by iteratively reweighted least squares.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::special::{digamma, expit, ln_gamma, logit, trigamma};
use super::terms::{design_row, TermSpec};
use crate::error::{Error, Result};
use crate::record::{CoarsenedRecord, Point};

/// Probabilities returned by logistic predictions are clipped into this band.
pub const PROB_EPS: f64 = 1e-12;

/// Exponential family with its link: gaussian/identity, bernoulli/logit, gamma/log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlmFamily {
    #[serde(rename = "gaussian-identity", alias = "gaussian")]
    Gaussian,
    #[serde(rename = "bernoulli-logit", alias = "bernoulli", alias = "logistic")]
    Bernoulli,
    #[serde(rename = "gamma-log", alias = "gamma")]
    Gamma,
}

impl GlmFamily {
    #[inline]
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => eta,
            GlmFamily::Bernoulli => expit(eta).clamp(PROB_EPS, 1.0 - PROB_EPS),
            GlmFamily::Gamma => eta.exp(),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => mu,
            GlmFamily::Bernoulli => logit(mu),
            GlmFamily::Gamma => mu.ln(),
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => mu * (1.0 - mu),
            GlmFamily::Gamma => mu * mu,
        }
    }

    /// d mu / d eta
    fn mu_eta(self, eta: f64, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => (mu * (1.0 - mu)).max(PROB_EPS),
            GlmFamily::Gamma => eta.exp(),
        }
    }

    /// Unit deviance contribution.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => (y - mu).powi(2),
            GlmFamily::Bernoulli => {
                let mu = mu.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -2.0 * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln())
            }
            GlmFamily::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
        }
    }

    pub fn check_response(self, y: f64) -> Result<()> {
        let ok = match self {
            GlmFamily::Gaussian => y.is_finite(),
            GlmFamily::Bernoulli => y == 0.0 || y == 1.0,
            GlmFamily::Gamma => y.is_finite() && y > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("response {y} outside the support of the {self} family")))
        }
    }

    fn initial_eta(self, y: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => y,
            GlmFamily::Bernoulli => logit((y + 0.5) / 2.0),
            GlmFamily::Gamma => y.ln(),
        }
    }
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GlmFamily::Gaussian => "gaussian-identity",
            GlmFamily::Bernoulli => "bernoulli-logit",
            GlmFamily::Gamma => "gamma-log",
        })
    }
}

impl FromStr for GlmFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-identity" | "gaussian" => Ok(GlmFamily::Gaussian),
            "bernoulli-logit" | "bernoulli" | "logistic" => Ok(GlmFamily::Bernoulli),
            "gamma-log" | "gamma" => Ok(GlmFamily::Gamma),
            _ => Err(Error::config(format!("unknown GLM family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Penalty {
    None,
    Lasso { lambda: f64 },
}

/// How the gamma shape is obtained after the mean model converges.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeEstimator {
    /// `(n - p) / Pearson chi^2`.
    #[default]
    Pearson,
    /// Profile maximum likelihood given the fitted means.
    Mle,
    Fixed { alpha: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct GlmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
    pub shape: ShapeEstimator,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { max_iter: 50, tol: 1e-10, max_halvings: 10, shape: ShapeEstimator::Pearson }
    }
}

/// A fitted GLM. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlm {
    pub terms: Vec<TermSpec>,
    pub coefficients: Vec<f64>,
    pub family: GlmFamily,
    /// Residual sd for gaussian, shape for gamma, absent for bernoulli.
    pub dispersion: Option<f64>,
    pub penalty: Penalty,
    pub converged: bool,
    pub n_used: usize,
}

impl FittedGlm {
    /// Model with fixed coefficients, e.g. a known generating law.
    pub fn fixed(family: GlmFamily, terms: Vec<TermSpec>, coefficients: Vec<f64>, dispersion: Option<f64>) -> Result<Self> {
        if terms.len() != coefficients.len() {
            return Err(Error::config(format!(
                "{} terms but {} coefficients",
                terms.len(),
                coefficients.len()
            )));
        }
        match (family, dispersion) {
            (GlmFamily::Bernoulli, _) => {}
            (_, Some(d)) if d > 0.0 && d.is_finite() => {}
            (GlmFamily::Gaussian, Some(d)) if d == 0.0 => {}
            _ => return Err(Error::config(format!("{family} model needs a positive dispersion"))),
        }
        Ok(FittedGlm {
            terms,
            coefficients,
            family,
            dispersion: if family == GlmFamily::Bernoulli { None } else { dispersion },
            penalty: Penalty::None,
            converged: true,
            n_used: 0,
        })
    }

    /// Constant-probability logistic model.
    pub fn constant_probability(p: f64) -> Self {
        FittedGlm {
            terms: vec![TermSpec::Intercept],
            coefficients: vec![logit(p)],
            family: GlmFamily::Bernoulli,
            dispersion: None,
            penalty: Penalty::None,
            converged: true,
            n_used: 0,
        }
    }

    #[inline]
    pub fn linear_predictor(&self, p: &Point) -> f64 {
        self.terms.iter().zip(&self.coefficients).map(|(t, b)| b * t.eval(p)).sum()
    }

    /// Conditional mean on an already-validated point (no missing-variable check).
    #[inline]
    pub fn mean_at(&self, p: &Point) -> f64 {
        self.family.inverse_link(self.linear_predictor(p))
    }

    /// Conditional mean or probability for a record; fails if a term's
    /// variable is absent.
    pub fn predict_point(&self, p: &Point) -> Result<f64> {
        let row = design_row(&self.terms, p, 0)?;
        let eta: f64 = row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum();
        Ok(self.family.inverse_link(eta))
    }

    pub fn shape(&self) -> Option<f64> {
        (self.family == GlmFamily::Gamma).then_some(self.dispersion).flatten()
    }

    pub fn sigma(&self) -> Option<f64> {
        (self.family == GlmFamily::Gaussian).then_some(self.dispersion).flatten()
    }

    /// Density (or mass, for bernoulli) of `value` given the point.
    pub fn density(&self, p: &Point, value: f64) -> f64 {
        let mu = self.mean_at(p);
        match self.family {
            GlmFamily::Bernoulli => {
                if value >= 0.5 {
                    mu
                } else {
                    1.0 - mu
                }
            }
            GlmFamily::Gaussian => {
                let s = self.dispersion.unwrap_or(0.0);
                let z = (value - mu) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            }
            GlmFamily::Gamma => {
                let a = self.dispersion.unwrap_or(1.0);
                if value <= 0.0 {
                    return 0.0;
                }
                let rate = a / mu;
                (a * rate.ln() + (a - 1.0) * value.ln() - rate * value - ln_gamma(a)).exp()
            }
        }
    }
}

/// Conditional mean or probability for a record.
pub fn glm_predict(fit: &FittedGlm, record: &CoarsenedRecord) -> Result<f64> {
    fit.predict_point(&record.point())
}

/// Weighted normal-equation pieces `X' W X` and `X' W z`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = x.shape();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    for j in 0..p {
        let cj = x.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += w[i] * cj[i] * z[i];
        }
        xtwz[j] = s;
        for k in 0..=j {
            let ck = x.column(k);
            let mut s = 0.0;
            for i in 0..n {
                s += w[i] * cj[i] * ck[i];
            }
            xtwx[(j, k)] = s;
            xtwx[(k, j)] = s;
        }
    }
    (xtwx, xtwz)
}

/// Fails when the scaled cross-product matrix is numerically rank deficient.
pub(crate) fn check_rank(xtwx: &DMatrix<f64>) -> Result<()> {
    let p = xtwx.nrows();
    let d: Vec<f64> = (0..p).map(|j| xtwx[(j, j)]).collect();
    if let Some(j) = d.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Singular(format!("column {j} is identically zero")));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| xtwx[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= max * 1e-12 {
        return Err(Error::Singular(format!("design is rank deficient (eigenvalue ratio {:.3e})", min / max)));
    }
    Ok(())
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.cholesky().map(|c| c.solve(b))
}

fn deviance(family: GlmFamily, y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(mu).zip(w).map(|((&y, &m), &w)| w * family.unit_deviance(y, m)).sum()
}

/// Fits a GLM by IRLS with step halving.
///
/// Stops when the relative deviance change falls below `opts.tol` or after
/// `opts.max_iter` iterations. Rank-deficient designs are an error; logistic
/// separation yields `converged == false`.
pub fn fit_glm(
    family: GlmFamily,
    terms: &[TermSpec],
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<FittedGlm> {
    fit_glm_with(family, terms, design, response, weights, &GlmOptions::default())
}

pub fn fit_glm_with(
    family: GlmFamily,
    terms: &[TermSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &GlmOptions,
) -> Result<FittedGlm> {
    let (n, p) = x.shape();
    if terms.len() != p {
        return Err(Error::config(format!("{} terms for a design with {p} columns", terms.len())));
    }
    if y.len() != n {
        return Err(Error::config(format!("response length {} != design rows {n}", y.len())));
    }
    if n < p || p == 0 {
        return Err(Error::Singular(format!("{n} observations for {p} coefficients")));
    }
    for &v in y {
        family.check_response(v)?;
    }
    let prior: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::domain("weights must be finite, nonnegative and one per row"));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };

    let mut eta: Vec<f64> = y.iter().map(|&v| family.initial_eta(v)).collect();
    let mut mu: Vec<f64> = eta.iter().map(|&e| family.inverse_link(e)).collect();
    let mut beta: Option<DVector<f64>> = None;
    let mut dev_old: Option<f64> = None;
    let mut converged = false;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];

    for iter in 0..opts.max_iter {
        for i in 0..n {
            let d = family.mu_eta(eta[i], mu[i]);
            let var = family.variance(mu[i]).max(PROB_EPS);
            w[i] = prior[i] * d * d / var;
            z[i] = eta[i] + (y[i] - mu[i]) / d;
        }
        let (xtwx, xtwz) = weighted_gram(x, &w, &z);
        if iter == 0 {
            check_rank(&xtwx)?;
        }
        let Some(mut candidate) = solve_spd(xtwx, &xtwz) else {
            // Only reachable after the first iteration, when weights collapse.
            break;
        };
        let mut eta_new = x * &candidate;
        let mut mu_new: Vec<f64> = eta_new.iter().map(|&e| family.inverse_link(e)).collect();
        let mut dev = deviance(family, y, &mu_new, &prior);
        if let (Some(prev), Some(old)) = (&beta, dev_old) {
            let mut halvings = 0;
            while (!dev.is_finite() || dev > old * (1.0 + 1e-12) + 1e-300) && halvings < opts.max_halvings {
                candidate = (&candidate + prev) * 0.5;
                eta_new = x * &candidate;
                mu_new = eta_new.iter().map(|&e| family.inverse_link(e)).collect();
                dev = deviance(family, y, &mu_new, &prior);
                halvings += 1;
            }
        }
        if !candidate.iter().all(|b| b.is_finite()) {
            break;
        }
        eta = eta_new.iter().copied().collect();
        mu = mu_new;
        beta = Some(candidate);
        if let Some(old) = dev_old {
            if (dev - old).abs() / (dev.abs() + 0.1) < opts.tol {
                converged = true;
                break;
            }
        }
        dev_old = Some(dev);
    }

    let beta = beta.ok_or_else(|| Error::Singular("IRLS produced no finite solution".into()))?;
    if family == GlmFamily::Bernoulli && eta.iter().any(|e| e.abs() > 30.0) {
        // Fitted probabilities numerically 0 or 1: separation.
        converged = false;
    }

    let dof = (n - p) as f64;
    let dispersion = match family {
        GlmFamily::Bernoulli => None,
        GlmFamily::Gaussian => {
            let rss: f64 = (0..n).map(|i| prior[i] * (y[i] - mu[i]).powi(2)).sum();
            Some(if dof > 0.0 { (rss / dof).sqrt() } else { 0.0 })
        }
        GlmFamily::Gamma => {
            let pearson: f64 = (0..n).map(|i| prior[i] * ((y[i] - mu[i]) / mu[i]).powi(2)).sum();
            let moment = if dof > 0.0 && pearson > 0.0 { dof / pearson } else { f64::INFINITY };
            Some(match opts.shape {
                ShapeEstimator::Pearson => moment,
                ShapeEstimator::Fixed { alpha } => alpha,
                ShapeEstimator::Mle => gamma_shape_mle(y, &mu, &prior, moment),
            })
        }
    };

    Ok(FittedGlm {
        terms: terms.to_vec(),
        coefficients: beta.iter().copied().collect(),
        family,
        dispersion,
        penalty: Penalty::None,
        converged,
        n_used: n,
    })
}

/// Profile MLE of the gamma shape: solves `ln a - psi(a) = mean unit deviance / 2`.
fn gamma_shape_mle(y: &[f64], mu: &[f64], w: &[f64], start: f64) -> f64 {
    let wsum: f64 = w.iter().sum();
    let target: f64 = y
        .iter()
        .zip(mu)
        .zip(w)
        .map(|((&y, &m), &w)| w * (-(y / m).ln() + (y - m) / m))
        .sum::<f64>()
        / wsum;
    if !(target > 0.0) {
        return start;
    }
    let mut a = if start.is_finite() && start > 0.0 { start } else { 1.0 / target };
    for _ in 0..100 {
        let f = a.ln() - digamma(a) - target;
        let df = 1.0 / a - trigamma(a);
        let mut next = a - f / df;
        if next <= 0.0 {
            next = a / 2.0;
        }
        if (next - a).abs() < 1e-12 * a {
            return next;
        }
        a = next;
    }
    a
}

/// Score vector `X' W_prior (y - mu) dmu/deta / V(mu)` divided by `n`; zero at the MLE.
pub fn score(fit: &FittedGlm, x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    let (n, p) = x.shape();
    let beta = DVector::from_column_slice(&fit.coefficients);
    let eta = x * beta;
    let mut out = vec![0.0; p];
    for i in 0..n {
        let e = eta[i];
        let m = fit.family.inverse_link(e);
        let factor = weights.map_or(1.0, |w| w[i]) * (y[i] - m) * fit.family.mu_eta(e, m) / fit.family.variance(m).max(PROB_EPS);
        for (j, o) in out.iter_mut().enumerate() {
            *o += x[(i, j)] * factor;
        }
    }
    out.iter().map(|s| s / n as f64).collect()
}
