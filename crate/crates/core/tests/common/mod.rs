//! Shared oracles: brute-force transcriptions of the estimator formulas on a
//! small discrete instance, and the numeric identities checked by both the
//! unit-level integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use ccmar::harness::ScenarioConfig;
use ccmar::model_fit::special::expit;
use ccmar::model_fit::{
    build_design, expect_gamma, expect_outcome, fit_glm, BetaLaw, FittedGlm, GlmFamily, OutcomeLaw,
    QuadratureRule, TermSpec,
};
use ccmar::model_fit::lasso::fit_lasso_at;
use ccmar::nuisance::{ClipPolicy, IntegrationSettings, NuisanceSet, OutcomeModel, TreatmentModel};
use ccmar::record::{CoarsenedRecord, CompleteConfounders, PartialConfounders, Point, Var};
use ccmar::scenario_file::parse_scenario_file;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn load_scenario(name: &str) -> ScenarioConfig {
    parse_scenario_file(&scenario_path(name)).expect("shipped scenario parses")
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Coefficients of the discrete instance: gaussian outcome, two binary
/// partial confounders, logistic everything else.
pub struct Mini {
    /// `logit P(A=1) = e0 + e1 L1`
    pub eta: [f64; 2],
    /// `E[Y] = m0 + m1 L1 + m2 A`
    pub mu: [f64; 3],
    pub sigma: f64,
    /// `logit pi = p0 + p1 A + p2 Y + p3 L1`
    pub pi: [f64; 4],
    /// `logit P(L4=1) = c0 + c1 A + c2 Y + c3 L1`
    pub l4: [f64; 4],
    /// `logit P(L5=1) = d0 + d1 L4 + d2 Y + d3 A`
    pub l5: [f64; 4],
}

pub const MINI: Mini = Mini {
    eta: [0.2, -0.5],
    mu: [0.3, 0.4, 0.7],
    sigma: 0.8,
    pi: [0.5, 0.3, -0.4, 0.2],
    l4: [-0.2, 0.6, 0.5, -0.3],
    l5: [0.1, 0.8, -0.6, 0.4],
};

pub fn mini_nuisances(settings: IntegrationSettings) -> NuisanceSet {
    use TermSpec::{Intercept, Main};
    let m = &MINI;
    let glm = |family, terms: Vec<TermSpec>, coefs: &[f64], d| FittedGlm::fixed(family, terms, coefs.to_vec(), d).unwrap();
    NuisanceSet::from_models(
        TreatmentModel::Fitted(glm(GlmFamily::Bernoulli, vec![Intercept, Main(Var::L1)], &m.eta, None)),
        OutcomeModel::Gaussian(glm(GlmFamily::Gaussian, vec![Intercept, Main(Var::L1), Main(Var::A)], &m.mu, Some(m.sigma))),
        glm(GlmFamily::Bernoulli, vec![Intercept, Main(Var::A), Main(Var::Y), Main(Var::L1)], &m.pi, None),
        glm(GlmFamily::Bernoulli, vec![Intercept, Main(Var::A), Main(Var::Y), Main(Var::L1)], &m.l4, None),
        Some(glm(GlmFamily::Bernoulli, vec![Intercept, Main(Var::L4), Main(Var::Y), Main(Var::A)], &m.l5, None)),
        ClipPolicy::Off,
        settings,
    )
    .unwrap()
}

/// Twelve hand-laid records covering every (L1, A, S, L4, L5) pattern.
pub fn mini_data() -> Vec<CoarsenedRecord> {
    (0..12)
        .map(|i| {
            let s = i % 3 != 0;
            CoarsenedRecord {
                lc: Some(CompleteConfounders { gender: f64::from(i % 2), bmi: 0.5 * f64::from(i), hispanic: f64::from(u8::from(i % 5 == 0)) }),
                a: ((i / 2) % 2) as u8,
                y: 0.1 * f64::from(i) - 0.4,
                s,
                lp: s.then(|| PartialConfounders { l4: f64::from((i / 3) % 2), l5: Some(f64::from((i / 4) % 2)) }),
            }
        })
        .collect()
}

fn bern(p: f64, x: f64) -> f64 {
    if x == 1.0 {
        p
    } else {
        1.0 - p
    }
}

fn mini_lambda(l1: f64, a: f64, y: f64, l4: f64, l5: f64) -> f64 {
    let m = &MINI;
    let p4 = expit(m.l4[0] + m.l4[1] * a + m.l4[2] * y + m.l4[3] * l1);
    let p5 = expit(m.l5[0] + m.l5[1] * l4 + m.l5[2] * y + m.l5[3] * a);
    bern(p4, l4) * bern(p5, l5)
}

/// Formula-by-formula evaluation with the outcome law replaced by the
/// tabulated nodes the library integrates against. Returns `(iwor, if)`.
pub fn mini_oracle(ns: &NuisanceSet, data: &[CoarsenedRecord], a: u8) -> (f64, f64) {
    let m = &MINI;
    let af = f64::from(a);
    let lp_support = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    let mut iwor = 0.0;
    let mut one_step = 0.0;
    for r in data {
        let lc = r.lc.unwrap();
        let l1 = lc.gender;
        let lc_point = Point::EMPTY.with(Var::L1, lc.gender).with(Var::L2, lc.bmi).with(Var::L3, lc.hispanic);
        let eta1 = expit(m.eta[0] + m.eta[1] * l1);
        let eta = [1.0 - eta1, eta1];
        let beta_gamma = |arm: f64, l4: f64, l5: f64| -> (f64, f64) {
            let (ys, ws) = ns.outcome_quadrature(&lc_point, arm as u8);
            let mut b = 0.0;
            let mut g = 0.0;
            for (y, w) in ys.iter().zip(&ws) {
                let lam = mini_lambda(l1, arm, *y, l4, l5);
                g += w * lam;
                b += w * y * lam;
            }
            (b, g)
        };
        let xi = |l4, l5| {
            let (b, g) = beta_gamma(af, l4, l5);
            b / g
        };
        let tau_over_gamma = |l4, l5| {
            let g0 = beta_gamma(0.0, l4, l5).1;
            let g1 = beta_gamma(1.0, l4, l5).1;
            (eta[0] * g0 + eta[1] * g1) / if a == 1 { g1 } else { g0 }
        };
        let ra = f64::from(r.a);
        let b1: f64 = lp_support.iter().map(|&(l4, l5)| mini_lambda(l1, ra, r.y, l4, l5) * xi(l4, l5)).sum();
        let b2: f64 = lp_support
            .iter()
            .map(|&(l4, l5)| mini_lambda(l1, af, r.y, l4, l5) * tau_over_gamma(l4, l5) * (r.y - xi(l4, l5)))
            .sum();
        let ind = if r.a == a { 1.0 } else { 0.0 };
        let mut v = b1 + ind / eta[usize::from(a)] * b2;
        if r.s {
            let lp = r.lp.unwrap();
            let (l4, l5) = (lp.l4, lp.l5.unwrap());
            let pi = expit(m.pi[0] + m.pi[1] * ra + m.pi[2] * r.y + m.pi[3] * l1);
            let x = xi(l4, l5);
            iwor += x / pi;
            v += (x - b1 + ind / eta[usize::from(a)] * (tau_over_gamma(l4, l5) * (r.y - x) - b2)) / pi;
        }
        one_step += v;
    }
    let n = data.len() as f64;
    (iwor / n, one_step / n)
}

/// Largest relative deviation of `got` from `want`.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Worst error over gaussian, gamma and beta moment identities.
pub fn quadrature_identity_error() -> f64 {
    let mut worst: f64 = 0.0;
    let hermite = QuadratureRule::gauss_hermite(20).unwrap();
    for (m, s) in [(0.0, 1.0), (-0.207, 0.109), (3.5, 2.25)] {
        let law = OutcomeLaw::Gaussian { mean: m, sd: s };
        worst = worst.max(rel_err(expect_outcome(&law, |_| 1.0, &hermite).unwrap(), 1.0));
        worst = worst.max(rel_err(expect_outcome(&law, |y| y, &hermite).unwrap(), m));
        worst = worst.max(rel_err(expect_outcome(&law, |y| y * y, &hermite).unwrap(), m * m + s * s));
    }
    for (alpha, rate) in [(3.619, 1.7), (1.0, 0.4), (0.5, 2.0)] {
        let rule = QuadratureRule::gauss_laguerre(30, alpha - 1.0).unwrap();
        worst = worst.max(rel_err(expect_gamma(alpha, rate, |_| 1.0, &rule).unwrap(), 1.0));
        worst = worst.max(rel_err(expect_gamma(alpha, rate, |l| l, &rule).unwrap(), alpha / rate));
        worst = worst.max(rel_err(expect_gamma(alpha, rate, |l| l * l, &rule).unwrap(), alpha * (alpha + 1.0) / (rate * rate)));
    }
    let legendre = QuadratureRule::gauss_legendre(40).unwrap();
    for (p, q) in [(2.0, 4.0), (4.0, 2.0), (3.0, 3.0)] {
        let law = OutcomeLaw::Beta(BetaLaw::new(p, q).unwrap());
        let s = p + q;
        worst = worst.max(rel_err(expect_outcome(&law, |_| 1.0, &legendre).unwrap(), 1.0));
        worst = worst.max(rel_err(expect_outcome(&law, |y| y, &legendre).unwrap(), p / s));
        worst = worst.max(rel_err(expect_outcome(&law, |y| y * y, &legendre).unwrap(), p * (p + 1.0) / (s * (s + 1.0))));
    }
    worst
}

fn glm_points(n: usize, seed: u64) -> Vec<Point> {
    let mut g = ccmar::rng::from_key(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            Point::EMPTY
                .with(Var::L1, f64::from(u8::from(g.random::<f64>() < 0.5)))
                .with(Var::L2, normal.sample(&mut g))
                .with(Var::A, f64::from(u8::from(g.random::<f64>() < 0.4)))
        })
        .collect()
}

fn records_from_points(points: &[Point]) -> Vec<CoarsenedRecord> {
    points
        .iter()
        .map(|p| CoarsenedRecord {
            lc: Some(CompleteConfounders { gender: p.value(Var::L1), bmi: p.value(Var::L2), hispanic: 0.0 }),
            a: p.value(Var::A) as u8,
            y: 0.0,
            s: false,
            lp: None,
        })
        .collect()
}

/// Design and responses from a known GLM, for each family.
pub fn glm_sample(family: GlmFamily, n: usize, seed: u64) -> (Vec<TermSpec>, DMatrix<f64>, Vec<f64>) {
    use TermSpec::{Intercept, Interaction, Main};
    let terms = vec![Intercept, Main(Var::L1), Main(Var::L2), Main(Var::A), Interaction(Var::L2, Var::A)];
    let beta = [0.4, -0.3, 0.25, 0.5, -0.2];
    let points = glm_points(n, seed);
    let x = build_design(&terms, &records_from_points(&points)).unwrap();
    let mut g = ccmar::rng::from_key(seed ^ 0xabcd);
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..terms.len()).map(|j| x[(i, j)] * beta[j]).sum();
            match family {
                GlmFamily::Gaussian => eta + Normal::new(0.0, 0.5).unwrap().sample(&mut g),
                GlmFamily::Bernoulli => f64::from(u8::from(g.random::<f64>() < expit(eta))),
                GlmFamily::Gamma => {
                    let alpha = 3.0;
                    Gamma::new(alpha, eta.exp() / alpha).unwrap().sample(&mut g)
                }
            }
        })
        .collect();
    (terms, x, y)
}

/// `max_j |(1/n) sum_i x_ij (y_i - mu_i) dmu/deta / V(mu)|`, written out per family.
pub fn score_norm(family: GlmFamily, x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let (n, p) = x.shape();
    let mut s = vec![0.0; p];
    for i in 0..n {
        let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
        let factor = match family {
            GlmFamily::Gaussian => y[i] - eta,
            GlmFamily::Bernoulli => y[i] - expit(eta),
            // log link: dmu/deta = mu, V = mu^2
            GlmFamily::Gamma => (y[i] - eta.exp()) / eta.exp(),
        };
        for j in 0..p {
            s[j] += x[(i, j)] * factor;
        }
    }
    s.iter().map(|v| (v / n as f64).abs()).fold(0.0, f64::max)
}

/// Worst score-equation residual over the three families.
pub fn glm_score_error() -> f64 {
    [GlmFamily::Gaussian, GlmFamily::Bernoulli, GlmFamily::Gamma]
        .into_iter()
        .map(|family| {
            let (terms, x, y) = glm_sample(family, 4000, 17 + family as u64);
            let fit = fit_glm(family, &terms, &x, &y, None).unwrap();
            assert!(fit.converged);
            score_norm(family, &x, &y, &fit.coefficients)
        })
        .fold(0.0, f64::max)
}

/// Mean-zero, mutually orthogonal +-1 columns with unit (1/n) variance:
/// columns 1..=3 of the order-8 Sylvester Hadamard matrix, repeated.
pub fn orthonormal_design(reps: usize) -> DMatrix<f64> {
    let h = |i: usize, j: usize| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    let cols = [1usize, 2, 4];
    DMatrix::from_fn(8 * reps, 4, |i, j| if j == 0 { 1.0 } else { h(i % 8, cols[j - 1]) })
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    z.signum() * (z.abs() - lambda).max(0.0)
}

/// Worst coefficient-wise deviation from soft-thresholded OLS over a lambda grid.
pub fn lasso_soft_threshold_error() -> f64 {
    use TermSpec::{Intercept, Main};
    let terms = vec![Intercept, Main(Var::L1), Main(Var::L2), Main(Var::L3)];
    let x = orthonormal_design(4);
    let n = x.nrows();
    let mut g = ccmar::rng::from_key(99);
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.8 * x[(i, 1)] - 0.3 * x[(i, 2)] + 0.05 * x[(i, 3)] + Normal::new(0.0, 0.2).unwrap().sample(&mut g))
        .collect();
    let ols: Vec<f64> = (1..4).map(|j| (0..n).map(|i| x[(i, j)] * y[i]).sum::<f64>() / n as f64).collect();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.01, 0.1, 0.25, 0.5, 1.0] {
        let fit = fit_lasso_at(GlmFamily::Gaussian, &terms, &x, &y, lambda).unwrap();
        worst = worst.max((fit.coefficients[0] - ybar).abs());
        for j in 0..3 {
            worst = worst.max((fit.coefficients[j + 1] - soft_threshold(ols[j], lambda)).abs());
        }
    }
    worst
}
