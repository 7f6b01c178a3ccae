mod common;

use ccmar::dgp::{gen_levis, ScenarioCoefficients};
use ccmar::model_fit::special::{expit, ln_gamma};
use ccmar::model_fit::{FittedGlm, GlmFamily, TermSpec};
use ccmar::nuisance::{
    fit_nuisance_set, ClipPolicy, EtaSpec, IntegrationSettings, LpSpec, MuSpec, NuisanceSet, OutcomeModel,
    TreatmentModel,
};
use ccmar::record::{CoarsenedRecord, Point, Var};
use ccmar::Error;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use common::*;

fn scenario1() -> ScenarioCoefficients {
    load_scenario("scenario1.toml").coefficients
}

fn lc(l1: f64, l2: f64, l3: f64) -> Point {
    Point::EMPTY.with(Var::L1, l1).with(Var::L2, l2).with(Var::L3, l3)
}

fn gamma_pdf(x: f64, shape: f64, mean: f64) -> f64 {
    let rate = shape / mean;
    (shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)).exp()
}

#[test]
fn beta_gamma_matches_riemann_oracle() {
    let coef = scenario1();
    let ns = coef.true_nuisances(IntegrationSettings::default()).unwrap();
    let l = lc(1.0, 5.0, 0.0);
    let a = 1.0;
    let l4 = 2.0;
    let OutcomeModel::Gaussian(mu) = &ns.mu else { panic!("gaussian outcome") };
    let m = mu.mean_at(&l.with(Var::A, a));
    let s = mu.sigma().unwrap();
    let shape = coef.lambda1.dispersion.unwrap();

    // 10^6-point midpoint rule over m +- 12 sd.
    let k = 1_000_000;
    let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
    let h = (hi - lo) / k as f64;
    let (mut beta, mut gamma) = (0.0, 0.0);
    for i in 0..k {
        let y = lo + (i as f64 + 0.5) * h;
        let phi = (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let lam = gamma_pdf(l4, shape, coef.lambda1.mean_at(&l.with(Var::A, a).with(Var::Y, y)));
        gamma += h * phi * lam;
        beta += h * phi * lam * y;
    }
    let (b, g) = ns.beta_gamma(&l, 1, &Point::EMPTY.with(Var::L4, l4)).unwrap();
    assert!((g - gamma).abs() / gamma < 1e-6, "gamma {g} vs {gamma}");
    assert!((b - beta).abs() / beta.abs() < 1e-6, "beta {b} vs {beta}");
}

fn settings_with_laguerre(k: usize) -> IntegrationSettings {
    IntegrationSettings { laguerre_nodes: k, ..Default::default() }
}

#[test]
fn laguerre_30_agrees_with_60() {
    let coef = scenario1();
    let ns30 = coef.true_nuisances(settings_with_laguerre(30)).unwrap();
    let ns60 = coef.true_nuisances(settings_with_laguerre(60)).unwrap();
    let mut worst: f64 = 0.0;
    for (l1, l2, l3) in [(0.0, 0.0, 0.0), (1.0, 5.0, 0.0), (1.0, -8.0, 1.0), (0.0, 30.0, 1.0)] {
        let p = lc(l1, l2, l3);
        for y in [-0.4, -0.2, 0.0, 0.15, 0.4] {
            for a in 0..2u8 {
                for a_obs in 0..2u8 {
                    let (u, v) = (ns30.b_a1(&p, a_obs, y, a).unwrap(), ns60.b_a1(&p, a_obs, y, a).unwrap());
                    worst = worst.max((u - v).abs() / v.abs().max(1e-3));
                }
                let (u, v) = (ns30.b_a2(&p, y, a).unwrap(), ns60.b_a2(&p, y, a).unwrap());
                worst = worst.max((u - v).abs() / v.abs().max(1e-3));
            }
        }
    }
    assert!(worst < 1e-6, "worst relative gap {worst:e}");
}

#[test]
fn np_b_a1_matches_monte_carlo() {
    let coef = ScenarioCoefficients::np_beta();
    let ns = coef.true_nuisances(IntegrationSettings::default()).unwrap();
    let (a_obs, y) = (1.0, 0.5);
    let p4 = expit(-0.6 + 0.5 * a_obs + 0.25 * y + 0.1 * a_obs * y);
    let mut g = ccmar::rng::from_key(31);
    let eps = Normal::new(0.0, 1.25).unwrap();
    let draws = 1_000_000;
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let l4 = f64::from(u8::from(g.random::<f64>() < p4));
        let l5 = a_obs + y + 2.5 * l4 * y + eps.sample(&mut g);
        let (b, gm) = ns.beta_gamma(&Point::EMPTY, 1, &Point::EMPTY.with(Var::L4, l4).with(Var::L5, l5)).unwrap();
        vals.push(b / gm);
    }
    let (m, sd) = mean_sd(&vals);
    let se = sd / (draws as f64).sqrt();
    let q = ns.b_a1(&Point::EMPTY, 1, y, 1).unwrap();
    assert!((q - m).abs() < 3.0 * se, "quadrature {q} vs mc {m} +- {se}");
}

/// np-style law with only the binary partial confounder.
fn binary_only() -> NuisanceSet {
    let np = ScenarioCoefficients::np_beta();
    let ns = np.true_nuisances(IntegrationSettings::default()).unwrap();
    NuisanceSet::from_models(ns.eta, ns.mu, ns.pi, ns.lambda1, None, ClipPolicy::Off, IntegrationSettings::default()).unwrap()
}

#[test]
fn binary_lp_two_term_sums() {
    let ns = binary_only();
    let e = Point::EMPTY;
    for y in [0.1, 0.5, 0.83] {
        for a_obs in 0..2u8 {
            let p1 = expit(-0.6 + 0.5 * f64::from(a_obs) + 0.25 * y + 0.1 * f64::from(a_obs) * y);
            for a in 0..2u8 {
                let xi = |l4: f64| {
                    let (b, g) = ns.beta_gamma(&e, a, &e.with(Var::L4, l4)).unwrap();
                    b / g
                };
                let want = p1 * xi(1.0) + (1.0 - p1) * xi(0.0);
                assert!((ns.b_a1(&e, a_obs, y, a).unwrap() - want).abs() < 1e-12);
            }
        }
        for a in 0..2u8 {
            let p1 = expit(-0.6 + 0.5 * f64::from(a) + 0.25 * y + 0.1 * f64::from(a) * y);
            let term = |l4: f64| {
                let lp = e.with(Var::L4, l4);
                let (b, g) = ns.beta_gamma(&e, a, &lp).unwrap();
                ns.tau(&e, &lp).unwrap() / g * (y - b / g)
            };
            let want = p1 * term(1.0) + (1.0 - p1) * term(0.0);
            assert!((ns.b_a2(&e, y, a).unwrap() - want).abs() < 1e-12);
        }
    }
}

/// Scenario-1 laws with every Y and L_p dependence removed from lambda.
fn y_free_lambda() -> NuisanceSet {
    use TermSpec::*;
    let coef = scenario1();
    let ns = coef.true_nuisances(IntegrationSettings::default()).unwrap();
    let l1 = FittedGlm::fixed(GlmFamily::Gamma, vec![Intercept, Main(Var::L1), Main(Var::A)], vec![0.867, 0.075, 0.303], Some(3.619)).unwrap();
    NuisanceSet::from_models(ns.eta, ns.mu, ns.pi, l1, None, ClipPolicy::Off, IntegrationSettings::default()).unwrap()
}

#[test]
fn lambda_free_of_y_gives_outcome_mean() {
    let ns = y_free_lambda();
    let p = lc(1.0, 12.0, 0.0);
    let OutcomeModel::Gaussian(mu) = &ns.mu else { panic!() };
    for a in 0..2u8 {
        let lp = Point::EMPTY.with(Var::L4, 2.3);
        let (b, g) = ns.beta_gamma(&p, a, &lp).unwrap();
        let density = ns.lambda_density(&p.with(Var::A, f64::from(a)).with(Var::Y, 0.0).with(Var::L4, 2.3));
        assert!((g - density).abs() < 1e-12 * density.max(1.0));
        let m = mu.mean_at(&p.with(Var::A, f64::from(a)));
        assert!((b / g - m).abs() < 1e-12);
        // xi constant in l_p, so b_a1 is that constant and constant in y.
        for y in [-0.5, 0.0, 0.3, 1.0] {
            for a_obs in 0..2u8 {
                assert!((ns.b_a1(&p, a_obs, y, a).unwrap() - m).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn point_mass_outcome_limit() {
    use TermSpec::*;
    let coef = scenario1();
    let ns = coef.true_nuisances(IntegrationSettings::default()).unwrap();
    let mu0 = FittedGlm::fixed(GlmFamily::Gaussian, vec![Intercept, Main(Var::A)], vec![0.1, 0.05], Some(0.0)).unwrap();
    let ns = NuisanceSet::from_models(ns.eta, OutcomeModel::Gaussian(mu0), ns.pi, ns.lambda1, None, ClipPolicy::Off, ns.settings).unwrap();
    let p = lc(0.0, 3.0, 1.0);
    let m = 0.15;
    let (b, g) = ns.beta_gamma(&p, 1, &Point::EMPTY.with(Var::L4, 1.7)).unwrap();
    let lam = ns.lambda_density(&p.with(Var::A, 1.0).with(Var::Y, m).with(Var::L4, 1.7));
    assert!((g - lam).abs() < 1e-12 && (b - m * lam).abs() < 1e-12);
}

#[test]
fn tau_identities() {
    let coef = scenario1();
    let ns = coef.true_nuisances(IntegrationSettings::default()).unwrap();
    let p = lc(1.0, 5.0, 0.0);
    let lp = Point::EMPTY.with(Var::L4, 2.0);
    let (_, g0) = ns.beta_gamma(&p, 0, &lp).unwrap();
    let (_, g1) = ns.beta_gamma(&p, 1, &lp).unwrap();
    let e1 = coef.eta.predict_point(&p).unwrap();
    assert!((ns.tau(&p, &lp).unwrap() - ((1.0 - e1) * g0 + e1 * g1)).abs() < 1e-14);

    // Degenerate treatment law puts all mass on one arm.
    let certain = TreatmentModel::Known { p_treated: 1.0 };
    let ns1 = NuisanceSet::from_models(certain, ns.mu.clone(), ns.pi.clone(), ns.lambda1.clone(), None, ClipPolicy::Off, ns.settings).unwrap();
    assert_eq!(ns1.tau(&p, &lp).unwrap(), g1);

    // Half-half treatment and lambda free of A and Y: tau equals gamma and b_a2 = y - b_a1.
    use TermSpec::*;
    let flat = FittedGlm::fixed(GlmFamily::Gamma, vec![Intercept, Main(Var::L1)], vec![0.867, 0.075], Some(3.619)).unwrap();
    let half = TreatmentModel::Known { p_treated: 0.5 };
    let ns2 = NuisanceSet::from_models(half, ns.mu.clone(), ns.pi.clone(), flat, None, ClipPolicy::Off, ns.settings).unwrap();
    let (_, g) = ns2.beta_gamma(&p, 1, &lp).unwrap();
    assert!((ns2.tau(&p, &lp).unwrap() - g).abs() < 1e-14);
    for y in [-0.2, 0.1] {
        for a in 0..2u8 {
            let want = y - ns2.b_a1(&p, a, y, a).unwrap();
            assert!((ns2.b_a2(&p, y, a).unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn b_a2_vanishes_when_y_equals_xi() {
    let ns = y_free_lambda();
    let p = lc(0.0, -3.0, 0.0);
    let OutcomeModel::Gaussian(mu) = &ns.mu else { panic!() };
    for a in 0..2u8 {
        let m = mu.mean_at(&p.with(Var::A, f64::from(a)));
        assert!(ns.b_a2(&p, m, a).unwrap().abs() < 1e-12);
    }
}

#[test]
fn lambda_mass_is_one() {
    let s1 = scenario1().true_nuisances(IntegrationSettings::default()).unwrap();
    let s3 = load_scenario("scenario3.toml").coefficients.true_nuisances(IntegrationSettings::default()).unwrap();
    let np = ScenarioCoefficients::np_beta().true_nuisances(IntegrationSettings::default()).unwrap();
    for ns in [&s1, &s3] {
        for (l1, l2, l3) in [(0.0, 0.0, 0.0), (1.0, 25.0, 1.0), (1.0, -9.0, 0.0)] {
            for a in 0..2 {
                for y in [-0.5, 0.0, 0.6] {
                    let cond = lc(l1, l2, l3).with(Var::A, f64::from(a)).with(Var::Y, y);
                    assert!((ns.lambda_mass(&cond) - 1.0).abs() < 1e-8);
                }
            }
        }
    }
    for a in 0..2 {
        for y in [0.05, 0.5, 0.95] {
            let cond = Point::EMPTY.with(Var::A, f64::from(a)).with(Var::Y, y);
            assert!((np.lambda_mass(&cond) - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn gamma_positive_and_xi_finite_on_probe_grid() {
    let ns = load_scenario("scenario3.toml").coefficients.true_nuisances(IntegrationSettings::default()).unwrap();
    for l2 in [-10.0, 0.0, 20.0, 40.0] {
        for l4 in [1e-3, 0.5, 3.0, 20.0] {
            for l5 in [0.0, 1.0] {
                for a in 0..2u8 {
                    let (b, g) = ns.beta_gamma(&lc(1.0, l2, 1.0), a, &Point::EMPTY.with(Var::L4, l4).with(Var::L5, l5)).unwrap();
                    assert!(g > 0.0 && (b / g).is_finite());
                }
            }
        }
    }
}

/// Inverse Fisher information diagonal for a fitted GLM (canonical or log link).
fn glm_se(fit: &FittedGlm, rows: &[CoarsenedRecord]) -> Vec<f64> {
    let x = ccmar::model_fit::build_design(&fit.terms, rows).unwrap();
    let p = x.ncols();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrows() {
        let eta: f64 = (0..p).map(|j| x[(i, j)] * fit.coefficients[j]).sum();
        let w = match fit.family {
            GlmFamily::Bernoulli => expit(eta) * (1.0 - expit(eta)),
            GlmFamily::Gaussian => 1.0 / fit.sigma().unwrap().powi(2),
            GlmFamily::Gamma => fit.shape().unwrap(),
        };
        for j in 0..p {
            for k in 0..p {
                info[(j, k)] += w * x[(i, j)] * x[(i, k)];
            }
        }
    }
    let inv = info.try_inverse().unwrap();
    (0..p).map(|j| inv[(j, j)].sqrt()).collect()
}

fn assert_within_3se(name: &str, fit: &FittedGlm, truth: &FittedGlm, rows: &[CoarsenedRecord]) {
    let se = glm_se(fit, rows);
    for (j, t) in fit.terms.iter().enumerate() {
        let z = (fit.coefficients[j] - truth.coefficients[j]) / se[j];
        assert!(z.abs() < 3.0, "{name} {t}: fitted {} truth {} z {z:.2}", fit.coefficients[j], truth.coefficients[j]);
    }
}

#[test]
fn scenario1_fit_recovers_generating_coefficients() {
    let cfg = load_scenario("scenario1.toml");
    let coef = &cfg.coefficients;
    let mut g = ccmar::rng::stream(cfg.master_seed, 0, ccmar::rng::Stage::Data);
    let data = gen_levis(coef, &cfg.lc, 4344, &mut g).unwrap();
    let specs = coef.true_specs().unwrap();
    let ns = fit_nuisance_set(&data, &specs, ClipPolicy::default(), IntegrationSettings::default()).unwrap();
    let cc: Vec<CoarsenedRecord> = data.iter().filter(|r| r.s).copied().collect();
    let TreatmentModel::Fitted(eta) = &ns.eta else { panic!() };
    assert_within_3se("eta", eta, &coef.eta, &data);
    let OutcomeModel::Gaussian(mu) = &ns.mu else { panic!() };
    let ccmar::dgp::OutcomeSpec::Gaussian(mu_true) = &coef.mu else { panic!() };
    assert_within_3se("mu", mu, mu_true, &data);
    assert_within_3se("pi", &ns.pi, &coef.pi, &data);
    assert_within_3se("lambda1", &ns.lambda1, &coef.lambda1, &cc);
    assert!(ns.lambda1.n_used == cc.len() && ns.pi.n_used == data.len());
}

#[test]
fn null_model_slopes_near_zero() {
    use TermSpec::*;
    let mut coef = scenario1();
    for m in [&mut coef.eta, &mut coef.pi] {
        for (t, b) in m.terms.iter().zip(m.coefficients.iter_mut()) {
            if *t != Intercept {
                *b = 0.0;
            }
        }
    }
    let mut g = ccmar::rng::from_key(8);
    let data = gen_levis(&coef, &Default::default(), 4344, &mut g).unwrap();
    let ns = fit_nuisance_set(&data, &coef.true_specs().unwrap(), ClipPolicy::default(), IntegrationSettings::default()).unwrap();
    let TreatmentModel::Fitted(eta) = &ns.eta else { panic!() };
    assert_within_3se("eta", eta, &coef.eta, &data);
    assert_within_3se("pi", &ns.pi, &coef.pi, &data);
}

#[test]
fn fit_errors() {
    let coef = scenario1();
    let mut g = ccmar::rng::from_key(9);
    let mut data = gen_levis(&coef, &Default::default(), 300, &mut g).unwrap();
    let specs = coef.true_specs().unwrap();

    let mut bad = specs.clone();
    bad.eta = EtaSpec::Logistic { terms: vec![TermSpec::Intercept, TermSpec::Main(Var::L4)] };
    assert!(matches!(fit_nuisance_set(&data, &bad, ClipPolicy::default(), Default::default()), Err(Error::ConditioningSet { .. })));
    let mut bad = specs.clone();
    bad.mu = MuSpec::Gaussian { terms: vec![TermSpec::Intercept, TermSpec::Main(Var::Y)] };
    assert!(fit_nuisance_set(&data, &bad, ClipPolicy::default(), Default::default()).unwrap_err().is_config());
    let mut bad = specs.clone();
    bad.lambda2 = Some(LpSpec { family: GlmFamily::Gamma, terms: vec![TermSpec::Intercept], shape: Default::default() });
    assert!(fit_nuisance_set(&data, &bad, ClipPolicy::default(), Default::default()).unwrap_err().is_config());

    for r in data.iter_mut() {
        r.s = false;
        r.lp = None;
    }
    assert!(fit_nuisance_set(&data, &specs, ClipPolicy::default(), Default::default()).is_err());
    assert!(fit_nuisance_set(&[], &specs, ClipPolicy::default(), Default::default()).is_err());
}

#[test]
fn missing_lc_is_a_schema_error() {
    let ns = scenario1().true_nuisances(IntegrationSettings::default()).unwrap();
    assert!(ns.b_a1(&Point::EMPTY, 1, 0.0, 1).is_err());
    assert!(ns.beta_gamma(&lc(1.0, 0.0, 0.0), 1, &Point::EMPTY).is_err());
}
