//! Conventional pipelines: impute the partially missing confounders (or drop
//! incomplete rows), then adjust by outcome-regression standardization or by
//! Hajek-normalized inverse probability weighting.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_fit::lasso::LassoOptions;
use crate::model_fit::terms::{check_conditioning_set, main_terms, pairwise_terms};
use crate::model_fit::{build_design, fit_glm_with, fit_lasso_glm_with, FittedGlm, GlmFamily, GlmOptions, TermSpec};
use crate::nuisance::{ClipPolicy, LpSpec};
use crate::record::{CoarsenedRecord, PartialConfounders, Var};
use crate::rng;

/// Floor for gaussian-imputed values of the positive confounder.
pub const IMPUTE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// Gamma GLM for L4 and logistic model for L5 with the generating term lists.
    TrueDgp,
    /// Linear model for L4 and logistic model for L5 with main effects only.
    Simple,
    /// As `Simple` with all pairwise interactions and LASSO selection.
    Lasso,
    /// Drop incomplete rows.
    CompleteCase,
}

impl Imputation {
    pub const ALL: [Imputation; 4] = [Imputation::TrueDgp, Imputation::Simple, Imputation::Lasso, Imputation::CompleteCase];

    pub fn name(self) -> &'static str {
        match self {
            Imputation::TrueDgp => "true-dgp",
            Imputation::Simple => "simple",
            Imputation::Lasso => "lasso",
            Imputation::CompleteCase => "cc",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjustment {
    OutcomeRegression,
    Ipw,
}

impl Adjustment {
    pub fn name(self) -> &'static str {
        match self {
            Adjustment::OutcomeRegression => "or",
            Adjustment::Ipw => "ipw",
        }
    }
}

/// Main effects only, or all pairwise interactions with LASSO selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Plain,
    Lasso,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Plain => "plain",
            ModelVariant::Lasso => "lasso",
        }
    }
}

impl fmt::Display for Imputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Term lists for the true-DGP imputation models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeSpec {
    pub l4: LpSpec,
    pub l5: Option<LpSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorSpecs {
    pub true_dgp: ImputeSpec,
    /// Number of stochastic imputations averaged per estimate.
    pub imputations: usize,
    pub ps_clip: ClipPolicy,
    pub lasso_folds: usize,
}

/// Which variables the data carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub has_lc: bool,
    pub has_l5: bool,
}

impl Schema {
    pub fn of(data: &[CoarsenedRecord]) -> Self {
        Schema {
            has_lc: data.first().is_some_and(|r| r.lc.is_some()),
            has_l5: data.iter().find_map(|r| r.lp).is_some_and(|lp| lp.l5.is_some()),
        }
    }

    pub fn lc_vars(self) -> Vec<Var> {
        if self.has_lc {
            vec![Var::L1, Var::L2, Var::L3]
        } else {
            Vec::new()
        }
    }

    pub fn lp_vars(self) -> Vec<Var> {
        if self.has_l5 {
            vec![Var::L4, Var::L5]
        } else {
            vec![Var::L4]
        }
    }
}

/// Fitted imputation laws for L4 and (optionally) L5 given everything before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputer {
    pub l4: FittedGlm,
    pub l5: Option<FittedGlm>,
}

impl Imputer {
    pub fn nonconverged(&self) -> bool {
        !self.l4.converged || self.l5.as_ref().is_some_and(|m| !m.converged)
    }
}

fn fit_model(
    family: GlmFamily,
    terms: &[TermSpec],
    rows: &[CoarsenedRecord],
    y: &[f64],
    variant: ModelVariant,
    opts: &LassoOptions,
    glm: &GlmOptions,
) -> Result<FittedGlm> {
    let x = build_design(terms, rows)?;
    match variant {
        ModelVariant::Plain => fit_glm_with(family, terms, &x, y, None, glm),
        ModelVariant::Lasso => fit_lasso_glm_with(family, terms, &x, y, None, opts),
    }
}

/// Fits the imputation models of `variant` on the complete cases.
pub fn fit_imputer(data: &[CoarsenedRecord], variant: Imputation, specs: &ComparatorSpecs, seed: u64) -> Result<Imputer> {
    let schema = Schema::of(data);
    let cc: Vec<CoarsenedRecord> = data.iter().filter(|r| r.s).copied().collect();
    if cc.is_empty() {
        return Err(Error::domain("no complete cases to fit imputation models"));
    }
    let l4: Vec<f64> = cc.iter().map(|r| r.lp.map_or(f64::NAN, |lp| lp.l4)).collect();
    let l5: Vec<f64> = cc.iter().map(|r| r.lp.and_then(|lp| lp.l5).unwrap_or(f64::NAN)).collect();
    let mut pre = schema.lc_vars();
    pre.extend([Var::A, Var::Y]);
    let lasso = |k: u64| LassoOptions { folds: specs.lasso_folds, seed: rng::derive_key(seed, k), ..Default::default() };
    match variant {
        Imputation::TrueDgp => {
            let l4_spec = &specs.true_dgp.l4;
            check_conditioning_set("impute-l4", &l4_spec.terms, &[Var::L1, Var::L2, Var::L3, Var::A, Var::Y])?;
            let glm = GlmOptions { shape: l4_spec.shape, ..Default::default() };
            let m4 = fit_model(l4_spec.family, &l4_spec.terms, &cc, &l4, ModelVariant::Plain, &lasso(0), &glm)?;
            let m5 = match (&specs.true_dgp.l5, schema.has_l5) {
                (Some(s), true) => {
                    let glm = GlmOptions { shape: s.shape, ..Default::default() };
                    Some(fit_model(s.family, &s.terms, &cc, &l5, ModelVariant::Plain, &lasso(1), &glm)?)
                }
                (None, true) => return Err(Error::config("true-dgp imputation needs a model for L5")),
                _ => None,
            };
            Ok(Imputer { l4: m4, l5: m5 })
        }
        Imputation::Simple | Imputation::Lasso => {
            let mv = if variant == Imputation::Simple { ModelVariant::Plain } else { ModelVariant::Lasso };
            let terms = |vars: &[Var]| if mv == ModelVariant::Plain { main_terms(vars) } else { pairwise_terms(vars) };
            let glm = GlmOptions::default();
            let m4 = fit_model(GlmFamily::Gaussian, &terms(&pre), &cc, &l4, mv, &lasso(0), &glm)?;
            let m5 = if schema.has_l5 {
                let mut v = pre.clone();
                v.push(Var::L4);
                Some(fit_model(GlmFamily::Bernoulli, &terms(&v), &cc, &l5, mv, &lasso(1), &glm)?)
            } else {
                None
            };
            Ok(Imputer { l4: m4, l5: m5 })
        }
        Imputation::CompleteCase => Err(Error::config("complete-case analysis has no imputation model")),
    }
}

fn draw<R: Rng>(model: &FittedGlm, mean: f64, rng: &mut R) -> f64 {
    match model.family {
        GlmFamily::Bernoulli => f64::from(rng.random::<f64>() < mean),
        GlmFamily::Gamma => {
            let shape = model.dispersion.unwrap_or(1.0);
            Gamma::new(shape, mean / shape).map_or(mean, |g| g.sample(rng))
        }
        GlmFamily::Gaussian => {
            let sd = model.dispersion.unwrap_or(0.0);
            let v = if sd > 0.0 { Normal::new(mean, sd).map_or(mean, |n| n.sample(rng)) } else { mean };
            v.max(IMPUTE_FLOOR)
        }
    }
}

/// `m` completed copies of `data`: each incomplete row gets L4 drawn from the
/// fitted law, then L5 drawn given the imputed L4. Complete rows are untouched.
pub fn impute<R: Rng>(data: &[CoarsenedRecord], imputer: &Imputer, m: usize, rng: &mut R) -> Result<Vec<Vec<CoarsenedRecord>>> {
    if m < 1 {
        return Err(Error::config("number of imputations must be at least 1"));
    }
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let mut completed = data.to_vec();
        for rec in completed.iter_mut().filter(|r| !r.s) {
            let mut p = rec.point();
            let l4 = draw(&imputer.l4, imputer.l4.predict_point(&p)?, rng);
            p.set(Var::L4, l4);
            let l5 = match &imputer.l5 {
                Some(m5) => Some(draw_l5(m5, m5.predict_point(&p)?, rng)),
                None => None,
            };
            rec.lp = Some(PartialConfounders { l4, l5 });
        }
        out.push(completed);
    }
    Ok(out)
}

fn draw_l5<R: Rng>(model: &FittedGlm, mean: f64, rng: &mut R) -> f64 {
    match model.family {
        GlmFamily::Gaussian => {
            let sd = model.dispersion.unwrap_or(0.0);
            if sd > 0.0 {
                Normal::new(mean, sd).map_or(mean, |n| n.sample(rng))
            } else {
                mean
            }
        }
        _ => draw(model, mean, rng),
    }
}

/// Per-arm counterfactual means with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMeans {
    /// `[E Y(0), E Y(1)]`.
    pub chi: [f64; 2],
    pub nonconverged: bool,
    pub clipped: bool,
}

impl ArmMeans {
    pub fn ate(&self) -> f64 {
        self.chi[1] - self.chi[0]
    }
}

/// Adjustment-model settings shared by the OR and IPW paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustOptions {
    pub variant: ModelVariant,
    pub lasso_folds: usize,
    pub seed: u64,
    pub ps_clip: ClipPolicy,
}

impl Default for AdjustOptions {
    fn default() -> Self {
        AdjustOptions { variant: ModelVariant::Plain, lasso_folds: 5, seed: 0, ps_clip: ClipPolicy::default() }
    }
}

/// Outcome-model terms: treatment plus all confounders.
pub fn or_terms(schema: Schema, variant: ModelVariant) -> Vec<TermSpec> {
    let mut vars = vec![Var::A];
    vars.extend(schema.lc_vars());
    vars.extend(schema.lp_vars());
    match variant {
        ModelVariant::Plain => main_terms(&vars),
        ModelVariant::Lasso => pairwise_terms(&vars),
    }
}

/// Propensity-model terms: all confounders.
pub fn ps_terms(schema: Schema, variant: ModelVariant) -> Vec<TermSpec> {
    let mut vars = schema.lc_vars();
    vars.extend(schema.lp_vars());
    match variant {
        ModelVariant::Plain => main_terms(&vars),
        ModelVariant::Lasso => pairwise_terms(&vars),
    }
}

fn average(parts: Vec<ArmMeans>) -> ArmMeans {
    let m = parts.len() as f64;
    ArmMeans {
        chi: [parts.iter().map(|p| p.chi[0]).sum::<f64>() / m, parts.iter().map(|p| p.chi[1]).sum::<f64>() / m],
        nonconverged: parts.iter().any(|p| p.nonconverged),
        clipped: parts.iter().any(|p| p.clipped),
    }
}

fn non_empty(datasets: &[Vec<CoarsenedRecord>]) -> Result<()> {
    if datasets.is_empty() || datasets.iter().any(Vec::is_empty) {
        return Err(Error::domain("no completed data to analyze"));
    }
    Ok(())
}

/// Standardization: per dataset, fit `E[Y | A, L]` and average
/// `mu(1, L_i) - mu(0, L_i)` over all rows; averaged over the datasets.
pub fn ate_outcome_regression(datasets: &[Vec<CoarsenedRecord>], terms: &[TermSpec], opts: &AdjustOptions) -> Result<ArmMeans> {
    non_empty(datasets)?;
    let mut parts = Vec::with_capacity(datasets.len());
    for (k, d) in datasets.iter().enumerate() {
        let y: Vec<f64> = d.iter().map(|r| r.y).collect();
        let lasso = LassoOptions { folds: opts.lasso_folds, seed: rng::derive_key(opts.seed, k as u64), ..Default::default() };
        let fit = fit_model(GlmFamily::Gaussian, terms, d, &y, opts.variant, &lasso, &GlmOptions::default())?;
        let mut sum = [0.0; 2];
        for rec in d {
            let p = rec.point();
            for a in 0..2u8 {
                sum[usize::from(a)] += fit.predict_point(&p.with(Var::A, f64::from(a)))?;
            }
        }
        let n = d.len() as f64;
        parts.push(ArmMeans { chi: [sum[0] / n, sum[1] / n], nonconverged: !fit.converged, clipped: false });
    }
    Ok(average(parts))
}

/// Hajek estimator: per arm, `sum w_i Y_i / sum w_i` with `w_i = 1(A_i = a) / e(a | L_i)`.
pub fn ate_ipw(datasets: &[Vec<CoarsenedRecord>], terms: &[TermSpec], opts: &AdjustOptions) -> Result<ArmMeans> {
    non_empty(datasets)?;
    let mut parts = Vec::with_capacity(datasets.len());
    for (k, d) in datasets.iter().enumerate() {
        let n1 = d.iter().filter(|r| r.a == 1).count();
        if n1 == 0 || n1 == d.len() {
            return Err(Error::domain("all records fall in one treatment arm"));
        }
        let a: Vec<f64> = d.iter().map(|r| f64::from(r.a)).collect();
        let lasso = LassoOptions { folds: opts.lasso_folds, seed: rng::derive_key(opts.seed, k as u64), ..Default::default() };
        let fit = fit_model(GlmFamily::Bernoulli, terms, d, &a, opts.variant, &lasso, &GlmOptions::default())?;
        let mut num = [0.0; 2];
        let mut den = [0.0; 2];
        let mut clipped = false;
        for rec in d {
            let e1 = fit.predict_point(&rec.point())?;
            let arm = usize::from(rec.a);
            let raw = if arm == 1 { e1 } else { 1.0 - e1 };
            let (e, c) = opts.ps_clip.apply(raw);
            clipped |= c;
            num[arm] += rec.y / e;
            den[arm] += 1.0 / e;
        }
        parts.push(ArmMeans { chi: [num[0] / den[0], num[1] / den[1]], nonconverged: !fit.converged, clipped });
    }
    Ok(average(parts))
}

/// Restricts to complete cases and delegates to the chosen adjustment.
pub fn complete_case_ate(data: &[CoarsenedRecord], adjustment: Adjustment, opts: &AdjustOptions) -> Result<ArmMeans> {
    let cc: Vec<CoarsenedRecord> = data.iter().filter(|r| r.s).copied().collect();
    if cc.is_empty() {
        return Err(Error::domain("no complete cases"));
    }
    let schema = Schema::of(&cc);
    let sets = [cc];
    match adjustment {
        Adjustment::OutcomeRegression => ate_outcome_regression(&sets, &or_terms(schema, opts.variant), opts),
        Adjustment::Ipw => ate_ipw(&sets, &ps_terms(schema, opts.variant), opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::CompleteConfounders;

    fn rec(a: u8, y: f64, s: bool, l4: f64) -> CoarsenedRecord {
        CoarsenedRecord {
            lc: Some(CompleteConfounders { gender: f64::from(a ^ 1), bmi: y * 3.0, hispanic: 0.0 }),
            a,
            y,
            s,
            lp: s.then_some(PartialConfounders { l4, l5: None }),
        }
    }

    #[test]
    fn ipw_with_constant_propensity_is_difference_of_means() {
        let d = vec![rec(1, 1.0, true, 1.0), rec(1, 3.0, true, 2.0), rec(0, 0.5, true, 1.5), rec(0, 1.5, true, 0.5)];
        let terms = vec![TermSpec::Intercept];
        let m = ate_ipw(&[d], &terms, &AdjustOptions::default()).unwrap();
        assert!((m.chi[1] - 2.0).abs() < 1e-12);
        assert!((m.chi[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_arm_is_an_error() {
        let d = vec![rec(1, 1.0, true, 1.0), rec(1, 3.0, true, 2.0)];
        assert!(ate_ipw(&[d], &[TermSpec::Intercept], &AdjustOptions::default()).is_err());
    }

    #[test]
    fn nothing_to_impute_leaves_data_unchanged() {
        let d: Vec<_> = (0..30).map(|i| rec((i % 2) as u8, 0.1 * f64::from(i), true, 1.0 + 0.05 * f64::from(i))).collect();
        let imp = Imputer {
            l4: FittedGlm::fixed(GlmFamily::Gaussian, vec![TermSpec::Intercept], vec![1.0], Some(1.0)).unwrap(),
            l5: None,
        };
        let out = impute(&d, &imp, 2, &mut rng::from_key(1)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| *o == d));
        assert!(impute(&d, &imp, 0, &mut rng::from_key(1)).is_err());
    }

    #[test]
    fn degenerate_imputation_law_gives_the_mean() {
        let d = vec![rec(1, 0.2, false, 0.0), rec(0, 0.4, false, 0.0)];
        let imp = Imputer {
            l4: FittedGlm::fixed(GlmFamily::Gaussian, vec![TermSpec::Intercept, TermSpec::Main(Var::Y)], vec![1.0, 2.0], Some(0.0)).unwrap(),
            l5: None,
        };
        let out = impute(&d, &imp, 1, &mut rng::from_key(3)).unwrap();
        assert!((out[0][0].lp.unwrap().l4 - 1.4).abs() < 1e-15);
        assert!((out[0][1].lp.unwrap().l4 - 1.8).abs() < 1e-15);
    }

    #[test]
    fn gaussian_imputation_is_floored() {
        let d = vec![rec(1, 0.2, false, 0.0)];
        let imp = Imputer {
            l4: FittedGlm::fixed(GlmFamily::Gaussian, vec![TermSpec::Intercept], vec![-5.0], Some(0.0)).unwrap(),
            l5: None,
        };
        let out = impute(&d, &imp, 1, &mut rng::from_key(3)).unwrap();
        assert_eq!(out[0][0].lp.unwrap().l4, IMPUTE_FLOOR);
    }
}
