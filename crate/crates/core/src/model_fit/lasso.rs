//! L1-penalized GLMs: coordinate descent on standardized columns with an
//! unpenalized intercept, warm-started along a decreasing lambda path, with
//! lambda chosen by K-fold cross-validated deviance (lambda-min rule).
//!
//! Objective: `(1 / 2n) * sum w_i (z_i - x_i b)^2 + lambda * |b|_1` inside each
//! IRLS step, which is `deviance / 2n + lambda |b|_1` for both families.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use super::glm::{FittedGlm, GlmFamily, Penalty, PROB_EPS};
use super::special::expit;
use super::terms::TermSpec;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub folds: usize,
    pub seed: u64,
    /// Coordinate-descent tolerance on the scaled coefficient change.
    pub tol: f64,
    pub max_sweeps: usize,
    pub max_outer: usize,
    /// Stop the path once the fractional deviance improvement drops below 1e-5.
    pub early_stop: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions { folds: 5, seed: 0, tol: 1e-12, max_sweeps: 100_000, max_outer: 100, early_stop: true }
    }
}

pub const DEFAULT_N_LAMBDA: usize = 100;
pub const DEFAULT_LAMBDA_RATIO: f64 = 1e-3;

/// Relative deviance change that ends the IRLS loop at one lambda.
const IRLS_TOL: f64 = 1e-10;

struct Standardized {
    /// Column 0 is the all-ones intercept column.
    x: DMatrix<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    /// Position of the intercept in the caller's term order.
    intercept_at: usize,
    /// Caller column index for each standardized slope column (1..).
    slope_cols: Vec<usize>,
}

fn standardize(x: &DMatrix<f64>, intercept_at: usize, rows: &[usize]) -> Standardized {
    let p = x.ncols();
    let n = rows.len();
    let slope_cols: Vec<usize> = (0..p).filter(|&j| j != intercept_at).collect();
    let mut out = DMatrix::zeros(n, slope_cols.len() + 1);
    let mut means = vec![0.0; slope_cols.len() + 1];
    let mut sds = vec![1.0; slope_cols.len() + 1];
    for i in 0..n {
        out[(i, 0)] = 1.0;
    }
    for (k, &j) in slope_cols.iter().enumerate() {
        let col = x.column(j);
        let m = rows.iter().map(|&i| col[i]).sum::<f64>() / n as f64;
        let v = rows.iter().map(|&i| (col[i] - m).powi(2)).sum::<f64>() / n as f64;
        let s = v.sqrt();
        means[k + 1] = m;
        sds[k + 1] = s;
        for (r, &i) in rows.iter().enumerate() {
            out[(r, k + 1)] = if s > 0.0 { (col[i] - m) / s } else { 0.0 };
        }
    }
    Standardized { x: out, means, sds, intercept_at, slope_cols }
}

fn soft_threshold(g: f64, lambda: f64) -> f64 {
    if g > lambda {
        g - lambda
    } else if g < -lambda {
        g + lambda
    } else {
        0.0
    }
}

/// Smallest lambda at which every slope is zero.
pub fn lambda_max(family: GlmFamily, design: &DMatrix<f64>, terms: &[TermSpec], response: &[f64]) -> Result<f64> {
    let intercept_at = intercept_index(terms)?;
    let rows: Vec<usize> = (0..design.nrows()).collect();
    let st = standardize(design, intercept_at, &rows);
    Ok(lambda_max_std(family, &st.x, response))
}

fn lambda_max_std(_family: GlmFamily, xs: &DMatrix<f64>, y: &[f64]) -> f64 {
    // Null model mean is ybar for both families, so the gradient is x'(y - ybar)/n.
    let n = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    (1..xs.ncols())
        .map(|j| xs.column(j).iter().zip(y).map(|(x, y)| x * (y - ybar)).sum::<f64>().abs() / n)
        .fold(0.0, f64::max)
}

fn intercept_index(terms: &[TermSpec]) -> Result<usize> {
    terms
        .iter()
        .position(|t| *t == TermSpec::Intercept)
        .ok_or_else(|| Error::config("lasso models require an intercept term"))
}

/// Log-spaced grid from `lambda_max` down to `ratio * lambda_max`.
pub fn default_lambda_grid(lambda_max: f64, n_lambda: usize, ratio: f64) -> Vec<f64> {
    if n_lambda == 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..n_lambda)
        .map(|k| (hi + (lo - hi) * k as f64 / (n_lambda - 1) as f64).exp())
        .collect()
}

fn gram(xs: &DMatrix<f64>, w: &[f64], z: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let n = xs.nrows();
    let nf = n as f64;
    let mut xw = xs.clone();
    for mut col in xw.column_iter_mut() {
        for (v, wi) in col.iter_mut().zip(w) {
            *v *= wi;
        }
    }
    let h = xs.tr_mul(&xw) / nf;
    let r = (0..xs.ncols()).map(|j| xw.column(j).iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / nf).collect();
    (h, r)
}

/// Cyclic coordinate descent on the penalized quadratic `b'Hb/2 - r'b + lambda |b[1..]|_1`.
fn cd(h: &DMatrix<f64>, r: &[f64], lambda: f64, b: &mut [f64], active: &[bool], opts: &LassoOptions) {
    let p = r.len();
    let mut hb: Vec<f64> = (0..p).map(|j| (0..p).map(|k| h[(j, k)] * b[k]).sum()).collect();
    for _ in 0..opts.max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let hjj = h[(j, j)];
            if !active[j] || hjj <= 0.0 {
                continue;
            }
            let g = r[j] - (hb[j] - hjj * b[j]);
            let new = if j == 0 { g / hjj } else { soft_threshold(g, lambda) / hjj };
            let delta = new - b[j];
            if delta != 0.0 {
                for k in 0..p {
                    hb[k] += h[(k, j)] * delta;
                }
                b[j] = new;
                max_change = max_change.max(delta.abs() * hjj.sqrt());
            }
        }
        if max_change < opts.tol {
            break;
        }
    }
}

fn mean_deviance(family: GlmFamily, xs: &DMatrix<f64>, y: &[f64], b: &[f64]) -> f64 {
    let eta = linear(xs, b);
    eta.iter()
        .zip(y)
        .map(|(&e, &y)| family.unit_deviance(y, family.inverse_link(e)))
        .sum::<f64>()
        / y.len() as f64
}

fn linear(xs: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let (n, p) = xs.shape();
    let mut eta = vec![0.0; n];
    for j in 0..p {
        if b[j] != 0.0 {
            for (i, e) in eta.iter_mut().enumerate() {
                *e += xs[(i, j)] * b[j];
            }
        }
    }
    eta
}

/// One penalized fit at `lambda`, warm-started from `b`. `gaussian_gram` is
/// the fixed quadratic for the gaussian family.
#[allow(clippy::too_many_arguments)]
fn fit_one(
    family: GlmFamily,
    xs: &DMatrix<f64>,
    y: &[f64],
    gaussian_gram: Option<&(DMatrix<f64>, Vec<f64>)>,
    lambda: f64,
    b: &mut [f64],
    active: &[bool],
    opts: &LassoOptions,
) -> bool {
    let n = y.len();
    if let Some((h, r)) = gaussian_gram {
        cd(h, r, lambda, b, active, opts);
        return true;
    }
    debug_assert_eq!(family, GlmFamily::Bernoulli);
    let mut dev_old = f64::INFINITY;
    for _ in 0..opts.max_outer {
        let eta = linear(xs, b);
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let p = expit(eta[i]).clamp(PROB_EPS, 1.0 - PROB_EPS);
            w[i] = (p * (1.0 - p)).max(1e-5);
            z[i] = eta[i] + (y[i] - p) / w[i];
        }
        let (h, r) = gram(xs, &w, &z);
        cd(&h, &r, lambda, b, active, opts);
        let dev = mean_deviance(family, xs, y, b);
        if (dev_old - dev).abs() / (dev.abs() + 0.1) < IRLS_TOL {
            return true;
        }
        dev_old = dev;
    }
    false
}

struct Path {
    lambdas: Vec<f64>,
    /// Standardized-scale coefficients per lambda (intercept first).
    coefs: Vec<Vec<f64>>,
    converged: bool,
}

fn fit_path(family: GlmFamily, xs: &DMatrix<f64>, y: &[f64], grid: &[f64], opts: &LassoOptions, early_stop: bool) -> Path {
    let p = xs.ncols();
    let active: Vec<bool> = (0..p).map(|j| j == 0 || xs.column(j).iter().any(|&v| v != 0.0)).collect();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let mut b = vec![0.0; p];
    b[0] = match family {
        GlmFamily::Gaussian => ybar,
        _ => family.link(ybar.clamp(PROB_EPS, 1.0 - PROB_EPS)),
    };
    let gaussian_gram = (family == GlmFamily::Gaussian).then(|| gram(xs, &vec![1.0; y.len()], y));
    let null_dev = mean_deviance(family, xs, y, &b);
    let mut prev_dev = null_dev;
    let mut out = Path { lambdas: Vec::new(), coefs: Vec::new(), converged: true };
    for (k, &lambda) in grid.iter().enumerate() {
        out.converged &= fit_one(family, xs, y, gaussian_gram.as_ref(), lambda, &mut b, &active, opts);
        out.lambdas.push(lambda);
        out.coefs.push(b.clone());
        if early_stop && k >= 4 && null_dev > 0.0 {
            let dev = mean_deviance(family, xs, y, &b);
            if (prev_dev - dev) / null_dev < 1e-5 || dev / null_dev < 1e-3 {
                break;
            }
            prev_dev = dev;
        } else if early_stop {
            prev_dev = mean_deviance(family, xs, y, &b);
        }
    }
    out
}

fn to_original(st: &Standardized, b: &[f64], p: usize) -> Vec<f64> {
    let mut coef = vec![0.0; p];
    let mut intercept = b[0];
    for (k, &j) in st.slope_cols.iter().enumerate() {
        let s = st.sds[k + 1];
        let beta = if s > 0.0 { b[k + 1] / s } else { 0.0 };
        coef[j] = beta;
        intercept -= beta * st.means[k + 1];
    }
    coef[st.intercept_at] = intercept;
    coef
}

fn check_inputs(family: GlmFamily, terms: &[TermSpec], x: &DMatrix<f64>, y: &[f64], grid: &[f64], folds: usize) -> Result<usize> {
    if family == GlmFamily::Gamma {
        return Err(Error::config("lasso supports gaussian-identity and bernoulli-logit only"));
    }
    if grid.is_empty() {
        return Err(Error::config("empty lambda grid"));
    }
    if grid.windows(2).any(|w| !(w[0] > w[1])) || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::config("lambda grid must be nonnegative and strictly decreasing"));
    }
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 cross-validation folds, got {folds}")));
    }
    if terms.len() != x.ncols() || y.len() != x.nrows() {
        return Err(Error::config("design, terms and response dimensions disagree"));
    }
    if x.nrows() < folds {
        return Err(Error::domain("fewer rows than folds"));
    }
    for &v in y {
        family.check_response(v)?;
    }
    intercept_index(terms)
}

/// Fits the full-data path over `lambda_grid`, picks lambda by K-fold CV
/// deviance, and returns the coefficients at that lambda on the original scale.
pub fn fit_lasso_glm(
    family: GlmFamily,
    terms: &[TermSpec],
    design: &DMatrix<f64>,
    response: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<FittedGlm> {
    let opts = LassoOptions { folds, seed, ..Default::default() };
    fit_lasso_glm_with(family, terms, design, response, Some(lambda_grid), &opts)
}

/// As [`fit_lasso_glm`]; `lambda_grid = None` uses the default 100-point grid.
pub fn fit_lasso_glm_with(
    family: GlmFamily,
    terms: &[TermSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    lambda_grid: Option<&[f64]>,
    opts: &LassoOptions,
) -> Result<FittedGlm> {
    let intercept_at = intercept_index(terms)?;
    let n = x.nrows();
    let all: Vec<usize> = (0..n).collect();
    let st = standardize(x, intercept_at, &all);
    let (grid, early) = match lambda_grid {
        Some(g) => (g.to_vec(), false),
        None => {
            let lmax = lambda_max_std(family, &st.x, y).max(1e-12);
            (default_lambda_grid(lmax, DEFAULT_N_LAMBDA, DEFAULT_LAMBDA_RATIO), opts.early_stop)
        }
    };
    check_inputs(family, terms, x, y, &grid, opts.folds)?;

    let full = fit_path(family, &st.x, y, &grid, opts, early);
    let grid = full.lambdas.clone();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::from_key(opts.seed));
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % opts.folds;
    }
    let mut cv = vec![0.0; grid.len()];
    for k in 0..opts.folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
        let st_k = standardize(x, intercept_at, &train);
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let path = fit_path(family, &st_k.x, &y_train, &grid, opts, false);
        for (l, b) in path.coefs.iter().enumerate() {
            let coef = to_original(&st_k, b, terms.len());
            cv[l] += test
                .iter()
                .map(|&i| {
                    let eta: f64 = (0..terms.len()).map(|j| x[(i, j)] * coef[j]).sum();
                    family.unit_deviance(y[i], family.inverse_link(eta))
                })
                .sum::<f64>();
        }
    }
    let best = cv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (l, &v)| if v < acc.1 { (l, v) } else { acc })
        .0;
    Ok(FittedGlm {
        terms: terms.to_vec(),
        coefficients: to_original(&st, &full.coefs[best], terms.len()),
        family,
        dispersion: match family {
            GlmFamily::Gaussian => Some(residual_sd(x, y, &to_original(&st, &full.coefs[best], terms.len()))),
            _ => None,
        },
        penalty: Penalty::Lasso { lambda: grid[best] },
        converged: full.converged,
        n_used: n,
    })
}

/// Penalized fit at a single lambda without cross-validation.
pub fn fit_lasso_at(family: GlmFamily, terms: &[TermSpec], x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<FittedGlm> {
    let opts = LassoOptions::default();
    check_inputs(family, terms, x, y, &[lambda], 2)?;
    let intercept_at = intercept_index(terms)?;
    let all: Vec<usize> = (0..x.nrows()).collect();
    let st = standardize(x, intercept_at, &all);
    let path = fit_path(family, &st.x, y, &[lambda], &opts, false);
    let coefficients = to_original(&st, &path.coefs[0], terms.len());
    Ok(FittedGlm {
        terms: terms.to_vec(),
        dispersion: (family == GlmFamily::Gaussian).then(|| residual_sd(x, y, &coefficients)),
        coefficients,
        family,
        penalty: Penalty::Lasso { lambda },
        converged: path.converged,
        n_used: x.nrows(),
    })
}

fn residual_sd(x: &DMatrix<f64>, y: &[f64], coef: &[f64]) -> f64 {
    let n = y.len();
    let rss: f64 = (0..n)
        .map(|i| {
            let fit: f64 = (0..coef.len()).map(|j| x[(i, j)] * coef[j]).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let active = coef.iter().filter(|c| **c != 0.0).count();
    (rss / (n.saturating_sub(active).max(1)) as f64).sqrt()
}
