//! Data-generating processes: the complete-case factorization, the
//! alternative (full-data) factorization, and the Beta-outcome design without
//! always-observed confounders. Also the synthetic confounder generator and
//! ground-truth ATEs.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ccmar::chi_iwor;
use crate::model_fit::terms::{check_conditioning_set, validate_terms};
use crate::model_fit::{BetaLaw, FittedGlm, GlmFamily, ShapeEstimator, TermSpec};
use crate::nuisance::{ClipPolicy, EtaSpec, IntegrationSettings, LpSpec, MuSpec, NuisanceSet, NuisanceSpecs, OutcomeModel, TreatmentModel};
use crate::record::{CoarsenedRecord, CompleteConfounders, PartialConfounders, Point, Var};
use crate::rng;

/// Smallest Monte Carlo sample accepted for a truth computation.
pub const MIN_TRUTH_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factorization {
    /// `eta(L_c) -> mu(L_c, A) -> pi(L_c, A, Y) -> lambda(L_p | L_c, A, Y)` on complete cases.
    Levis,
    /// `lambda~(L_p | L_c) -> eta~(L_c, L_p) -> mu~(L_c, L_p, A) -> pi(L_c, A, Y)`, then masking.
    Alternative,
    /// No always-observed confounders, Beta outcomes per arm.
    NpBeta,
}

/// Outcome law of a generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeSpec {
    /// Gaussian linear model; `dispersion` holds `sigma_Y`.
    Gaussian(FittedGlm),
    /// Index 0 is the control arm.
    BetaPerArm([BetaLaw; 2]),
}

/// Generating models of one scenario. Model roles follow the factorization:
/// under [`Factorization::Alternative`] `lambda1`/`lambda2` condition on `L_c`
/// (and `L4`) only, and `eta`/`mu` additionally on `L_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCoefficients {
    pub factorization: Factorization,
    /// Logistic treatment model.
    pub eta: FittedGlm,
    pub mu: OutcomeSpec,
    /// Logistic complete-case model on `(L_c, A, Y)`.
    pub pi: FittedGlm,
    /// Law of L4; `dispersion` is the gamma shape for a gamma law.
    pub lambda1: FittedGlm,
    /// Law of L5 given L4.
    pub lambda2: Option<FittedGlm>,
}

fn allowed(f: Factorization, model: &str) -> &'static [Var] {
    use Var::*;
    match (f, model) {
        (Factorization::Alternative, "lambda1") => &[L1, L2, L3],
        (Factorization::Alternative, "lambda2") => &[L1, L2, L3, L4],
        (Factorization::Alternative, "eta") => &[L1, L2, L3, L4, L5],
        (Factorization::Alternative, "mu") => &[L1, L2, L3, L4, L5, A],
        (Factorization::NpBeta, "eta" | "mu") => &[],
        (Factorization::NpBeta, "pi" | "lambda1") => &[A, Y],
        (Factorization::NpBeta, "lambda2") => &[A, Y, L4],
        (_, m) => crate::nuisance::legal_vars(m),
    }
}

impl ScenarioCoefficients {
    /// The Beta-outcome design with two partially missing confounders: a
    /// binary one (stored as L4) and a gaussian one (stored as L5).
    pub fn np_beta() -> Self {
        use TermSpec::*;
        let ay = TermSpec::Interaction(Var::A, Var::Y);
        let fixed = |family, terms, coefs, disp| FittedGlm::fixed(family, terms, coefs, disp).expect("static model");
        ScenarioCoefficients {
            factorization: Factorization::NpBeta,
            eta: FittedGlm::constant_probability(0.5),
            mu: OutcomeSpec::BetaPerArm([BetaLaw { shape1: 2.0, shape2: 4.0 }, BetaLaw { shape1: 4.0, shape2: 2.0 }]),
            pi: fixed(GlmFamily::Bernoulli, vec![Intercept, Main(Var::A), Main(Var::Y), ay], vec![-0.35, 0.5, 0.18, 0.05], None),
            lambda1: fixed(GlmFamily::Bernoulli, vec![Intercept, Main(Var::A), Main(Var::Y), ay], vec![-0.6, 0.5, 0.25, 0.1], None),
            lambda2: Some(fixed(
                GlmFamily::Gaussian,
                vec![Main(Var::A), Main(Var::Y), TermSpec::Interaction(Var::L4, Var::Y)],
                vec![1.0, 1.0, 2.5],
                Some(1.25),
            )),
        }
    }

    pub fn has_lc(&self) -> bool {
        self.factorization != Factorization::NpBeta
    }

    /// Checks families and conditioning sets against the factorization.
    pub fn validate(&self) -> Result<()> {
        let f = self.factorization;
        let mut models: Vec<(&str, &FittedGlm)> = vec![("eta", &self.eta), ("pi", &self.pi), ("lambda1", &self.lambda1)];
        if let OutcomeSpec::Gaussian(m) = &self.mu {
            models.push(("mu", m));
            if m.family != GlmFamily::Gaussian || m.sigma().is_none() {
                return Err(Error::config("mu must be a gaussian model with sigma"));
            }
        } else if f != Factorization::NpBeta {
            return Err(Error::config("beta outcomes are only available in the np-beta design"));
        }
        if let Some(l2) = &self.lambda2 {
            models.push(("lambda2", l2));
            if l2.family == GlmFamily::Gamma {
                return Err(Error::config("lambda2 must be binary or gaussian"));
            }
        }
        for (name, m) in models {
            validate_terms(&m.terms)?;
            check_conditioning_set(name, &m.terms, allowed(f, name))?;
        }
        for (name, m) in [("eta", &self.eta), ("pi", &self.pi)] {
            if m.family != GlmFamily::Bernoulli {
                return Err(Error::config(format!("{name} must be a logistic model")));
            }
        }
        if self.lambda1.family == GlmFamily::Gaussian {
            return Err(Error::config("lambda1 must be a gamma or binary model"));
        }
        Ok(())
    }

    /// The generating laws as a nuisance set (no clipping). Only meaningful when
    /// the generating factorization is the complete-case one.
    pub fn true_nuisances(&self, settings: IntegrationSettings) -> Result<NuisanceSet> {
        if self.factorization == Factorization::Alternative {
            return Err(Error::config("the alternative factorization has no closed-form complete-case nuisances"));
        }
        let eta = if self.factorization == Factorization::NpBeta {
            TreatmentModel::Known { p_treated: self.eta.mean_at(&Point::EMPTY) }
        } else {
            TreatmentModel::Fitted(self.eta.clone())
        };
        let mu = match &self.mu {
            OutcomeSpec::Gaussian(m) => OutcomeModel::Gaussian(m.clone()),
            OutcomeSpec::BetaPerArm(l) => OutcomeModel::BetaPerArm(*l),
        };
        NuisanceSet::from_models(eta, mu, self.pi.clone(), self.lambda1.clone(), self.lambda2.clone(), ClipPolicy::Off, settings)
    }

    /// Nuisance specifications with the generating term lists and families.
    pub fn true_specs(&self) -> Result<NuisanceSpecs> {
        if self.factorization == Factorization::Alternative {
            return Err(Error::config("alternative-factorization scenarios need explicit CCMAR specifications"));
        }
        let lp = |m: &FittedGlm| LpSpec { family: m.family, terms: m.terms.clone(), shape: ShapeEstimator::Pearson };
        Ok(NuisanceSpecs {
            eta: match self.factorization {
                Factorization::NpBeta => EtaSpec::Known { p_treated: self.eta.mean_at(&Point::EMPTY) },
                _ => EtaSpec::Logistic { terms: self.eta.terms.clone() },
            },
            mu: match &self.mu {
                OutcomeSpec::Gaussian(m) => MuSpec::Gaussian { terms: m.terms.clone() },
                OutcomeSpec::BetaPerArm(_) => MuSpec::BetaPerArm,
            },
            pi: self.pi.terms.clone(),
            lambda1: lp(&self.lambda1),
            lambda2: self.lambda2.as_ref().map(lp),
        })
    }
}

/// Synthetic always-observed confounders: gender, centered BMI, Hispanic ethnicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcGenerator {
    pub p_gender: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
    /// BMI is redrawn until it falls in `[bmi_lower, bmi_upper]`.
    pub bmi_lower: f64,
    pub bmi_upper: f64,
    pub p_hispanic: f64,
}

impl Default for LcGenerator {
    fn default() -> Self {
        LcGenerator { p_gender: 0.5, bmi_mean: 15.0, bmi_sd: 8.0, bmi_lower: -10.0, bmi_upper: 40.0, p_hispanic: 0.1 }
    }
}

impl LcGenerator {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.p_gender) || !p_ok(self.p_hispanic) {
            return Err(Error::config("confounder probabilities must lie in [0, 1]"));
        }
        if !(self.bmi_sd > 0.0) || !(self.bmi_lower < self.bmi_upper) {
            return Err(Error::config("BMI law needs a positive sd and lower < upper"));
        }
        // Rejection sampling must accept with reasonable probability.
        let z = |x: f64| (x - self.bmi_mean) / self.bmi_sd;
        if z(self.bmi_upper) < -4.0 || z(self.bmi_lower) > 4.0 {
            return Err(Error::config("BMI truncation window has negligible mass"));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> CompleteConfounders {
        let gender = f64::from(rng.random::<f64>() < self.p_gender);
        let normal = Normal::new(self.bmi_mean, self.bmi_sd).expect("validated sd");
        let bmi = loop {
            let b = normal.sample(rng);
            if (self.bmi_lower..=self.bmi_upper).contains(&b) {
                break b;
            }
        };
        let hispanic = f64::from(rng.random::<f64>() < self.p_hispanic);
        CompleteConfounders { gender, bmi, hispanic }
    }
}

fn lc_point(lc: &CompleteConfounders) -> Point {
    Point::EMPTY.with(Var::L1, lc.gender).with(Var::L2, lc.bmi).with(Var::L3, lc.hispanic)
}

fn bernoulli<R: Rng>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// Draws from a GLM's conditional law at `p`.
fn draw_glm<R: Rng>(m: &FittedGlm, p: &Point, rng: &mut R) -> f64 {
    let mean = m.mean_at(p);
    match m.family {
        GlmFamily::Bernoulli => f64::from(bernoulli(mean, rng)),
        GlmFamily::Gamma => {
            // shape alpha, rate alpha / mean
            let shape = m.dispersion.unwrap_or(1.0);
            Gamma::new(shape, mean / shape).expect("positive gamma parameters").sample(rng)
        }
        GlmFamily::Gaussian => {
            let sd = m.dispersion.unwrap_or(0.0);
            if sd > 0.0 {
                Normal::new(mean, sd).expect("finite sd").sample(rng)
            } else {
                mean
            }
        }
    }
}

fn draw_outcome<R: Rng>(mu: &OutcomeSpec, p: &Point, rng: &mut R) -> f64 {
    match mu {
        OutcomeSpec::Gaussian(m) => draw_glm(m, p, rng),
        OutcomeSpec::BetaPerArm(laws) => {
            let law = laws[p.value(Var::A) as usize];
            Beta::new(law.shape1, law.shape2).expect("validated shapes").sample(rng)
        }
    }
}

fn partial(p: &Point, two: bool) -> PartialConfounders {
    PartialConfounders { l4: p.value(Var::L4), l5: two.then(|| p.value(Var::L5)) }
}

/// Complete-case factorization: L_p drawn only for complete cases.
pub fn gen_levis<R: Rng>(coef: &ScenarioCoefficients, lc_gen: &LcGenerator, n: usize, rng: &mut R) -> Result<Vec<CoarsenedRecord>> {
    if coef.factorization == Factorization::Alternative {
        return Err(Error::config("gen_levis needs a complete-case factorization"));
    }
    coef.validate()?;
    let two = coef.lambda2.is_some();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let lc = coef.has_lc().then(|| lc_gen.draw(rng));
        let mut p = lc.as_ref().map_or(Point::EMPTY, lc_point);
        let a = u8::from(bernoulli(coef.eta.mean_at(&p), rng));
        p.set(Var::A, f64::from(a));
        let y = draw_outcome(&coef.mu, &p, rng);
        p.set(Var::Y, y);
        let s = bernoulli(coef.pi.mean_at(&p), rng);
        let lp = if s {
            p.set(Var::L4, draw_glm(&coef.lambda1, &p, rng));
            if let Some(l2) = &coef.lambda2 {
                p.set(Var::L5, draw_glm(l2, &p, rng));
            }
            Some(partial(&p, two))
        } else {
            None
        };
        out.push(CoarsenedRecord { lc, a, y, s, lp });
    }
    Ok(out)
}

/// Alternative factorization; L_p is generated for everyone and masked where S = 0.
pub fn gen_alt<R: Rng>(coef: &ScenarioCoefficients, lc_gen: &LcGenerator, n: usize, rng: &mut R) -> Result<Vec<CoarsenedRecord>> {
    Ok(gen_alt_full(coef, lc_gen, n, rng)?.into_iter().map(|(r, _)| r).collect())
}

/// As [`gen_alt`], also returning each row's unmasked full-data point.
pub(crate) fn gen_alt_full<R: Rng>(
    coef: &ScenarioCoefficients,
    lc_gen: &LcGenerator,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(CoarsenedRecord, Point)>> {
    if coef.factorization != Factorization::Alternative {
        return Err(Error::config("gen_alt needs the alternative factorization"));
    }
    coef.validate()?;
    let two = coef.lambda2.is_some();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let lc = lc_gen.draw(rng);
        let mut p = lc_point(&lc);
        p.set(Var::L4, draw_glm(&coef.lambda1, &p, rng));
        if let Some(l2) = &coef.lambda2 {
            p.set(Var::L5, draw_glm(l2, &p, rng));
        }
        let a = u8::from(bernoulli(coef.eta.mean_at(&p), rng));
        p.set(Var::A, f64::from(a));
        let y = draw_outcome(&coef.mu, &p, rng);
        p.set(Var::Y, y);
        let s = bernoulli(coef.pi.mean_at(&p), rng);
        let lp = s.then(|| partial(&p, two));
        out.push((CoarsenedRecord { lc: Some(lc), a, y, s, lp }, p));
    }
    Ok(out)
}

/// Beta-outcome design without always-observed confounders.
pub fn gen_np<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<CoarsenedRecord>> {
    if n < 1 {
        return Err(Error::config("sample size must be at least 1"));
    }
    gen_levis(&ScenarioCoefficients::np_beta(), &LcGenerator::default(), n, rng)
}

/// Dispatches on the factorization.
pub fn generate<R: Rng>(coef: &ScenarioCoefficients, lc_gen: &LcGenerator, n: usize, rng: &mut R) -> Result<Vec<CoarsenedRecord>> {
    match coef.factorization {
        Factorization::Alternative => gen_alt(coef, lc_gen, n, rng),
        _ => gen_levis(coef, lc_gen, n, rng),
    }
}

/// Ground-truth ATE and its Monte Carlo standard error.
///
/// * Beta-outcome design: exactly `2/3 - 1/3`.
/// * Alternative factorization: mean over fresh `(L_c, L_p)` draws of the
///   counterfactual outcome means `mu~(L_c, L_p, 1) - mu~(L_c, L_p, 0)`.
/// * Complete-case factorization: the IWOR functional evaluated with the true,
///   unclipped nuisances on fresh draws.
///
/// Each of `repeats` batches uses `n_mc` draws; the error is `SD / sqrt(repeats)`.
pub fn true_ate(coef: &ScenarioCoefficients, lc_gen: &LcGenerator, n_mc: usize, repeats: usize, seed: u64) -> Result<(f64, f64)> {
    if coef.factorization == Factorization::NpBeta {
        if let OutcomeSpec::BetaPerArm(l) = &coef.mu {
            return Ok((l[1].mean() - l[0].mean(), 0.0));
        }
    }
    if n_mc < MIN_TRUTH_DRAWS {
        return Err(Error::config(format!("truth needs at least {MIN_TRUTH_DRAWS} draws, got {n_mc}")));
    }
    if repeats < 1 {
        return Err(Error::config("truth needs at least one repeat"));
    }
    let batch = |r: usize| -> Result<f64> {
        let mut g = rng::stream(seed, r as u64, rng::Stage::Truth);
        match coef.factorization {
            Factorization::Alternative => {
                let OutcomeSpec::Gaussian(mu) = &coef.mu else {
                    return Err(Error::config("alternative factorization needs a gaussian outcome"));
                };
                let rows = gen_alt_full(coef, lc_gen, n_mc, &mut g)?;
                let sum: f64 = rows.iter().map(|(_, p)| mu.mean_at(&p.with(Var::A, 1.0)) - mu.mean_at(&p.with(Var::A, 0.0))).sum();
                Ok(sum / n_mc as f64)
            }
            _ => {
                let ns = coef.true_nuisances(IntegrationSettings::default())?;
                let data = gen_levis(coef, lc_gen, n_mc, &mut g)?;
                Ok(chi_iwor(&ns, &data, 1)? - chi_iwor(&ns, &data, 0)?)
            }
        }
    };
    let values = run_batches(repeats, batch)?;
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

#[cfg(feature = "parallel")]
fn run_batches(repeats: usize, f: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    (0..repeats).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_batches(repeats: usize, f: impl Fn(usize) -> Result<f64>) -> Result<Vec<f64>> {
    (0..repeats).map(f).collect()
}
