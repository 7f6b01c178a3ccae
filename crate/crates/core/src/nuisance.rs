//! Nuisance models of the complete-case factorization and the integral
//! functionals built from them.
//!
//! The observed-data likelihood factors into a treatment law `eta(L_c, a)`, an
//! outcome law `mu(y | L_c, a)`, a complete-case probability `pi(L_c, A, Y)`
//! and the complete-case density `lambda(l_p | L_c, A, Y, S = 1)`. From these:
//!
//! * `gamma(L_c, a; l_p) = E_mu[ lambda(l_p | L_c, a, Y) ]`
//! * `beta(L_c, a; l_p)  = E_mu[ Y lambda(l_p | L_c, a, Y) ]`
//! * `xi = beta / gamma`, the outcome regression `E[Y | L_c, L_p, A = a]`
//! * `tau(L_c; l_p) = sum_a' eta(L_c, a') gamma(L_c, a'; l_p)`
//! * `b_a1(L_c, A, Y) = E_lambda[ xi(L_c, a; L_p) | L_c, A, Y ]`
//! * `b_a2(L_c, Y) = E_lambda[ (tau / gamma)(Y - xi) | L_c, A = a, Y ]`
//!
//! Integrals over `Y` use Gauss-Hermite (gaussian outcome) or Gauss-Legendre
//! on (0, 1) (beta outcome). Integrals over `L_p` are nested: generalized
//! Gauss-Laguerre for a gamma component, Gauss-Hermite for a gaussian
//! component, and an exact two-point sum for a binary component.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_fit::special::{expit, ln_gamma};
use crate::model_fit::terms::{check_conditioning_set, validate_terms, TermSpec};
use crate::model_fit::{
    build_design, fit_beta_mle, fit_glm_with, BetaLaw, FittedGlm, GlmFamily, GlmOptions, QuadratureRule, ShapeEstimator,
};
use crate::record::{CoarsenedRecord, Point, Var};
use crate::rng;

/// Floor on reported `gamma`; inside the ratios it applies relative to the larger arm.
pub const GAMMA_FLOOR: f64 = 1e-12;

const LC: [Var; 3] = [Var::L1, Var::L2, Var::L3];

pub(crate) fn legal_vars(model: &str) -> &'static [Var] {
    match model {
        "eta" => &LC,
        "mu" => &[Var::L1, Var::L2, Var::L3, Var::A],
        "pi" | "lambda1" => &[Var::L1, Var::L2, Var::L3, Var::A, Var::Y],
        "lambda2" => &[Var::L1, Var::L2, Var::L3, Var::A, Var::Y, Var::L4],
        _ => &[],
    }
}

/// Clipping applied to predicted probabilities before they are inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClipPolicy {
    Off,
    Bounds { lower: f64, upper: f64 },
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy::Bounds { lower: 0.01, upper: 0.99 }
    }
}

impl ClipPolicy {
    /// Returns the clipped value and whether clipping changed it.
    #[inline]
    pub fn apply(self, p: f64) -> (f64, bool) {
        match self {
            ClipPolicy::Off => (p, false),
            ClipPolicy::Bounds { lower, upper } => {
                let c = p.clamp(lower, upper);
                (c, c != p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LpIntegration {
    Quadrature,
    /// Seeded draws from the fitted complete-case law.
    MonteCarlo { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationSettings {
    /// Gauss-Hermite nodes for a gaussian outcome law.
    pub hermite_nodes: usize,
    /// Gauss-Legendre nodes on (0, 1) for a beta outcome law.
    pub legendre_nodes: usize,
    /// Generalized Gauss-Laguerre nodes for a gamma partial confounder.
    pub laguerre_nodes: usize,
    /// Gauss-Hermite nodes for a gaussian partial confounder.
    pub lp_hermite_nodes: usize,
    pub lp_mode: LpIntegration,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        IntegrationSettings {
            hermite_nodes: 20,
            legendre_nodes: 40,
            laguerre_nodes: 30,
            lp_hermite_nodes: 20,
            lp_mode: LpIntegration::Quadrature,
        }
    }
}

/// Treatment law `P(A = 1 | L_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TreatmentModel {
    Known { p_treated: f64 },
    Fitted(FittedGlm),
}

impl TreatmentModel {
    #[inline]
    pub fn prob(&self, a: u8, lc: &Point) -> f64 {
        let p1 = match self {
            TreatmentModel::Known { p_treated } => *p_treated,
            TreatmentModel::Fitted(m) => m.mean_at(lc),
        };
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

/// Outcome law `mu(y | L_c, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeModel {
    Gaussian(FittedGlm),
    /// Index 0 is the control arm.
    BetaPerArm([BetaLaw; 2]),
}

/// Which nuisance specifications to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpecs {
    pub eta: EtaSpec,
    pub mu: MuSpec,
    pub pi: Vec<TermSpec>,
    pub lambda1: LpSpec,
    pub lambda2: Option<LpSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EtaSpec {
    Known { p_treated: f64 },
    Logistic { terms: Vec<TermSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MuSpec {
    Gaussian { terms: Vec<TermSpec> },
    BetaPerArm,
}

/// Model for one partially missing confounder, fitted on complete cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpSpec {
    pub family: GlmFamily,
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub shape: ShapeEstimator,
}

impl NuisanceSpecs {
    /// Checks every spec against its legal conditioning set.
    pub fn validate(&self) -> Result<()> {
        if let EtaSpec::Logistic { terms } = &self.eta {
            validate_terms(terms)?;
            check_conditioning_set("eta", terms, legal_vars("eta"))?;
        }
        if let EtaSpec::Known { p_treated } = self.eta {
            if !(p_treated > 0.0 && p_treated < 1.0) {
                return Err(Error::config("known treatment probability must lie in (0, 1)"));
            }
        }
        if let MuSpec::Gaussian { terms } = &self.mu {
            validate_terms(terms)?;
            check_conditioning_set("mu", terms, legal_vars("mu"))?;
        }
        validate_terms(&self.pi)?;
        check_conditioning_set("pi", &self.pi, legal_vars("pi"))?;
        validate_terms(&self.lambda1.terms)?;
        check_conditioning_set("lambda1", &self.lambda1.terms, legal_vars("lambda1"))?;
        if let Some(l2) = &self.lambda2 {
            validate_terms(&l2.terms)?;
            check_conditioning_set("lambda2", &l2.terms, legal_vars("lambda2"))?;
            if l2.family == GlmFamily::Gamma {
                return Err(Error::config("second partial confounder must be binary or gaussian"));
            }
        }
        Ok(())
    }

    pub fn n_partial(&self) -> usize {
        1 + usize::from(self.lambda2.is_some())
    }
}

/// One factor of the complete-case density with its normalizing constant cached.
#[derive(Debug, Clone, PartialEq)]
struct LpFactor {
    var: Var,
    model: FittedGlm,
    /// Gamma: `-ln Gamma(shape)`; gaussian: `-ln(sigma sqrt(2 pi))`.
    log_norm: f64,
    /// Probability nodes of the standardized law (gamma: `Gamma(shape, 1)`; gaussian: `N(0, 1)`).
    std_nodes: Vec<f64>,
    std_weights: Vec<f64>,
    /// Terms free of L4/L5, constant across L_p nodes at a fixed `(L_c, a, y)`.
    fixed: Vec<(TermSpec, f64)>,
    /// Terms involving L4/L5.
    varying: Vec<(TermSpec, f64)>,
}

impl LpFactor {
    fn new(var: Var, model: FittedGlm, settings: &IntegrationSettings) -> Result<Self> {
        let (log_norm, std_nodes, std_weights) = match model.family {
            GlmFamily::Gamma => {
                let shape = model.shape().filter(|s| *s > 0.0 && s.is_finite()).ok_or_else(|| {
                    Error::domain(format!("gamma model for {var} has no valid shape"))
                })?;
                let rule = QuadratureRule::gauss_laguerre(settings.laguerre_nodes, shape - 1.0)?;
                let (_, x, w) = rule.standard_gamma()?;
                (-ln_gamma(shape), x, w)
            }
            GlmFamily::Gaussian => {
                let sd = model.sigma().filter(|s| *s > 0.0).ok_or_else(|| {
                    Error::domain(format!("gaussian model for {var} needs a positive sd"))
                })?;
                let rule = QuadratureRule::gauss_hermite(settings.lp_hermite_nodes)?;
                let (z, w) = rule.standard_normal()?;
                (-(sd * (2.0 * std::f64::consts::PI).sqrt()).ln(), z, w)
            }
            GlmFamily::Bernoulli => (0.0, vec![0.0, 1.0], vec![]),
        };
        let (varying, fixed): (Vec<_>, Vec<_>) = model
            .terms
            .iter()
            .copied()
            .zip(model.coefficients.iter().copied())
            .partition(|(t, _)| t.vars().any(Var::is_partial_confounder));
        Ok(LpFactor { var, model, log_norm, std_nodes, std_weights, fixed, varying })
    }

    #[inline]
    fn fixed_part(&self, p: &Point) -> f64 {
        self.fixed.iter().map(|(t, b)| b * t.eval(p)).sum()
    }

    #[inline]
    fn varying_part(&self, p: &Point) -> f64 {
        self.varying.iter().map(|(t, b)| b * t.eval(p)).sum()
    }

    /// Node constants for a factor without L_p-dependent terms, so that the
    /// log density at `x` is cheap: gamma `[alpha ln(rate) + norm, rate]`,
    /// bernoulli `[ln P(0), ln P(1)]`, gaussian `[mean, 0]`.
    #[inline]
    fn prepare(&self, eta: f64) -> [f64; 2] {
        match self.model.family {
            GlmFamily::Gamma => {
                let shape = self.model.dispersion.unwrap_or(1.0);
                let ln_rate = shape.ln() - eta;
                [shape * ln_rate + self.log_norm, ln_rate.exp()]
            }
            GlmFamily::Bernoulli => [log_expit(-eta), log_expit(eta)],
            GlmFamily::Gaussian => [eta, 0.0],
        }
    }

    /// Log density from [`LpFactor::prepare`] constants; `ln_x` is `ln x` for gamma.
    #[inline]
    fn log_density_prepared(&self, pre: [f64; 2], x: f64, ln_x: f64) -> f64 {
        match self.model.family {
            GlmFamily::Gamma => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                pre[0] + (self.model.dispersion.unwrap_or(1.0) - 1.0) * ln_x - pre[1] * x
            }
            GlmFamily::Bernoulli => {
                if x >= 0.5 {
                    pre[1]
                } else {
                    pre[0]
                }
            }
            GlmFamily::Gaussian => {
                let sd = self.model.dispersion.unwrap_or(1.0);
                let z = (x - pre[0]) / sd;
                -0.5 * z * z + self.log_norm
            }
        }
    }

    #[inline]
    fn log_density(&self, p: &Point) -> f64 {
        self.log_density_eta(self.model.linear_predictor(p), p.value(self.var))
    }

    #[inline]
    fn log_density_eta(&self, eta: f64, x: f64) -> f64 {
        match self.model.family {
            GlmFamily::Bernoulli => {
                let s = if x >= 0.5 { eta } else { -eta };
                log_expit(s)
            }
            GlmFamily::Gamma => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let shape = self.model.dispersion.unwrap_or(1.0);
                let ln_rate = shape.ln() - eta;
                shape * ln_rate + (shape - 1.0) * x.ln() - ln_rate.exp() * x + self.log_norm
            }
            GlmFamily::Gaussian => {
                let sd = self.model.dispersion.unwrap_or(1.0);
                let z = (x - eta) / sd;
                -0.5 * z * z + self.log_norm
            }
        }
    }

    /// Quadrature nodes (values, probability weights) of this factor's law at `p`.
    fn nodes(&self, p: &Point, out: &mut Vec<(f64, f64)>) {
        out.clear();
        let eta = self.model.linear_predictor(p);
        match self.model.family {
            GlmFamily::Bernoulli => {
                let q = expit(eta);
                out.push((0.0, 1.0 - q));
                out.push((1.0, q));
            }
            GlmFamily::Gamma => {
                let scale = eta.exp() / self.model.dispersion.unwrap_or(1.0);
                out.extend(self.std_nodes.iter().zip(&self.std_weights).map(|(&x, &w)| (x * scale, w)));
            }
            GlmFamily::Gaussian => {
                let sd = self.model.dispersion.unwrap_or(1.0);
                out.extend(self.std_nodes.iter().zip(&self.std_weights).map(|(&z, &w)| (eta + sd * z, w)));
            }
        }
    }

    fn sample<R: Rng>(&self, p: &Point, rng: &mut R) -> f64 {
        let mean = self.model.mean_at(p);
        match self.model.family {
            GlmFamily::Bernoulli => f64::from(rng.random::<f64>() < mean),
            GlmFamily::Gamma => {
                let shape = self.model.dispersion.unwrap_or(1.0);
                Gamma::new(shape, mean / shape).map(|g| g.sample(rng)).unwrap_or(mean)
            }
            GlmFamily::Gaussian => Normal::new(mean, self.model.dispersion.unwrap_or(0.0))
                .map(|n| n.sample(rng))
                .unwrap_or(mean),
        }
    }
}

/// `ln expit(s)` without overflow.
#[inline]
fn log_expit(s: f64) -> f64 {
    if s > 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

/// Per-arm outcome nodes: `E_mu[f(Y) | L_c, a] ~ sum_k w_k f(y_k)`.
#[derive(Debug, Clone, Default)]
struct OutcomeNodes {
    y: Vec<f64>,
    w: Vec<f64>,
    /// `base[f * len + k]`: L_p-free linear predictor of factor `f` at node `k`.
    base: Vec<f64>,
    /// `prepared[f * len + k]`: node constants for factors free of L_p terms.
    prepared: Vec<[f64; 2]>,
}

/// The fitted quartet plus integration rules. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pub eta: TreatmentModel,
    pub mu: OutcomeModel,
    pub pi: FittedGlm,
    pub lambda1: FittedGlm,
    pub lambda2: Option<FittedGlm>,
    pub pi_clip: ClipPolicy,
    pub settings: IntegrationSettings,
    /// Outcome rule: Hermite (gaussian) or Legendre (beta).
    pub y_rule: QuadratureRule,
    factors: Vec<LpFactor>,
    /// Normalized standard-normal nodes when `y_rule` is Hermite.
    y_std: (Vec<f64>, Vec<f64>),
}

/// Everything one record contributes to both estimators, for both arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerms {
    pub eta: [f64; 2],
    pub pi: f64,
    pub pi_clipped: bool,
    /// `b_a1(L_c, A_i, Y_i)` for a = 0, 1.
    pub b1: [f64; 2],
    /// `b_a2(L_c, Y_i)` at `a = A_i`.
    pub b2_observed_arm: f64,
    /// `xi(L_c, a; L_p,i)` for a = 0, 1 (complete cases only).
    pub xi: Option<[f64; 2]>,
    /// `tau / gamma(L_c, A_i; L_p,i)` (complete cases only).
    pub tau_over_gamma_observed_arm: Option<f64>,
}

impl NuisanceSet {
    /// Assembles a set from already-specified models (e.g. the true generating laws).
    pub fn from_models(
        eta: TreatmentModel,
        mu: OutcomeModel,
        pi: FittedGlm,
        lambda1: FittedGlm,
        lambda2: Option<FittedGlm>,
        pi_clip: ClipPolicy,
        settings: IntegrationSettings,
    ) -> Result<Self> {
        if pi.family != GlmFamily::Bernoulli {
            return Err(Error::config("pi must be a logistic model"));
        }
        if let TreatmentModel::Fitted(m) = &eta {
            if m.family != GlmFamily::Bernoulli {
                return Err(Error::config("eta must be a logistic model"));
            }
        }
        let y_rule = match &mu {
            OutcomeModel::Gaussian(m) => {
                if m.family != GlmFamily::Gaussian || m.sigma().is_none() {
                    return Err(Error::config("gaussian outcome model needs a residual sd"));
                }
                QuadratureRule::gauss_hermite(settings.hermite_nodes)?
            }
            OutcomeModel::BetaPerArm(_) => QuadratureRule::gauss_legendre(settings.legendre_nodes)?,
        };
        let y_std = y_rule.standard_normal().unwrap_or_default();
        let mut factors = vec![LpFactor::new(Var::L4, lambda1.clone(), &settings)?];
        if let Some(l2) = &lambda2 {
            factors.push(LpFactor::new(Var::L5, l2.clone(), &settings)?);
        }
        Ok(NuisanceSet { eta, mu, pi, lambda1, lambda2, pi_clip, settings, y_rule, factors, y_std })
    }

    pub fn n_partial(&self) -> usize {
        self.factors.len()
    }

    fn outcome_nodes(&self, lc: &Point, a: u8, out: &mut OutcomeNodes) {
        out.y.clear();
        out.w.clear();
        match &self.mu {
            OutcomeModel::Gaussian(m) => {
                let mean = m.mean_at(&lc.with(Var::A, f64::from(a)));
                let sd = m.dispersion.unwrap_or(0.0);
                let (z, w) = &self.y_std;
                out.y.extend(z.iter().map(|z| mean + sd * z));
                out.w.extend_from_slice(w);
            }
            OutcomeModel::BetaPerArm(laws) => {
                let law = &laws[usize::from(a)];
                for (&x, &w) in self.y_rule.nodes.iter().zip(&self.y_rule.weights) {
                    let y = 0.5 * (x + 1.0);
                    out.y.push(y);
                    out.w.push(0.5 * w * law.pdf(y));
                }
            }
        }
        out.base.clear();
        out.prepared.clear();
        let mut p = lc.with(Var::A, f64::from(a));
        for f in &self.factors {
            for &y in &out.y {
                p.set(Var::Y, y);
                let eta = f.fixed_part(&p);
                out.base.push(eta);
                out.prepared.push(if f.varying.is_empty() { f.prepare(eta) } else { [0.0; 2] });
            }
        }
    }

    /// `ln lambda(l_p | point)` with `point` carrying L_c, A, Y and L_p.
    #[inline]
    fn log_lambda(&self, p: &Point) -> f64 {
        self.factors.iter().map(|f| f.log_density(p)).sum()
    }

    /// Log-scaled `(beta_a, gamma_a)` for both arms at `lp_point` (L_c and L_p set),
    /// sharing one scale factor `exp(shift)`.
    fn scaled_moments(&self, lp_point: &Point, nodes: &[OutcomeNodes; 2], buf: &mut Vec<f64>) -> ([f64; 2], [f64; 2], f64) {
        buf.clear();
        let mut shift = f64::NEG_INFINITY;
        let mut xs = [(0.0, 0.0); 2];
        for (x, f) in xs.iter_mut().zip(&self.factors) {
            let v = lp_point.value(f.var);
            *x = (v, if f.model.family == GlmFamily::Gamma && v > 0.0 { v.ln() } else { 0.0 });
        }
        for a in 0..2u8 {
            let on = &nodes[usize::from(a)];
            let ny = on.y.len();
            let mut p = lp_point.with(Var::A, f64::from(a));
            for (k, &y) in on.y.iter().enumerate() {
                p.set(Var::Y, y);
                let mut l = 0.0;
                for (fi, f) in self.factors.iter().enumerate() {
                    let (x, ln_x) = xs[fi];
                    l += if f.varying.is_empty() {
                        f.log_density_prepared(on.prepared[fi * ny + k], x, ln_x)
                    } else {
                        f.log_density_eta(on.base[fi * ny + k] + f.varying_part(&p), x)
                    };
                }
                shift = shift.max(l);
                buf.push(l);
            }
        }
        if !shift.is_finite() {
            shift = 0.0;
        }
        let mut beta = [0.0; 2];
        let mut gamma = [0.0; 2];
        let mut k = 0;
        for a in 0..2 {
            let on = &nodes[a];
            for (&y, &w) in on.y.iter().zip(&on.w) {
                let v = w * (buf[k] - shift).exp();
                gamma[a] += v;
                beta[a] += v * y;
                k += 1;
            }
        }
        (beta, gamma, shift)
    }

    /// `xi_a` for both arms and `tau / gamma_a` for both arms at `lp_point`.
    fn ratios(&self, lp_point: &Point, eta: [f64; 2], nodes: &[OutcomeNodes; 2], buf: &mut Vec<f64>) -> ([f64; 2], [f64; 2]) {
        let (beta, gamma, _) = self.scaled_moments(lp_point, nodes, buf);
        // Floor relative to the larger arm: the shared scale keeps the ratios
        // exact, so only a numerically vanishing arm needs guarding.
        let floor = GAMMA_FLOOR * gamma[0].max(gamma[1]);
        let g = [gamma[0].max(floor).max(f64::MIN_POSITIVE), gamma[1].max(floor).max(f64::MIN_POSITIVE)];
        let tau = eta[0] * gamma[0] + eta[1] * gamma[1];
        ([beta[0] / g[0], beta[1] / g[1]], [tau / g[0], tau / g[1]])
    }

    /// Nodes (L_p values, probability weight) of the complete-case law at `cond`.
    fn lp_nodes(&self, cond: &Point, out: &mut Vec<(Point, f64)>) {
        out.clear();
        match self.settings.lp_mode {
            LpIntegration::Quadrature => {
                let mut first = Vec::new();
                self.factors[0].nodes(cond, &mut first);
                let mut second = Vec::new();
                for &(v1, w1) in &first {
                    let p1 = cond.with(Var::L4, v1);
                    if self.factors.len() == 1 {
                        out.push((p1, w1));
                        continue;
                    }
                    self.factors[1].nodes(&p1, &mut second);
                    for &(v2, w2) in &second {
                        out.push((p1.with(Var::L5, v2), w1 * w2));
                    }
                }
            }
            LpIntegration::MonteCarlo { draws, seed } => {
                let key = cond.0.iter().fold(seed, |k, v| rng::derive_key(k, v.to_bits()));
                let mut r = rng::from_key(key);
                let w = 1.0 / draws.max(1) as f64;
                for _ in 0..draws.max(1) {
                    let mut p = *cond;
                    for f in &self.factors {
                        let v = f.sample(&p, &mut r);
                        p.set(f.var, v);
                    }
                    out.push((p, w));
                }
            }
        }
    }

    fn eta_pair(&self, lc: &Point) -> [f64; 2] {
        [self.eta.prob(0, lc), self.eta.prob(1, lc)]
    }

    fn both_outcome_nodes(&self, lc: &Point) -> [OutcomeNodes; 2] {
        let mut n0 = OutcomeNodes::default();
        let mut n1 = OutcomeNodes::default();
        self.outcome_nodes(lc, 0, &mut n0);
        self.outcome_nodes(lc, 1, &mut n1);
        [n0, n1]
    }

    /// `(beta, gamma)` at `(L_c, a; l_p)`; `gamma` floored at [`GAMMA_FLOOR`].
    ///
    /// `lc` carries L1..L3 (absent for designs without them); `lp` carries L4 (and L5).
    pub fn beta_gamma(&self, lc: &Point, a: u8, lp: &Point) -> Result<(f64, f64)> {
        let lp_point = self.merge_lp(lc, lp)?;
        let nodes = self.both_outcome_nodes(lc);
        let mut buf = Vec::new();
        let (beta, gamma, shift) = self.scaled_moments(&lp_point, &nodes, &mut buf);
        let scale = shift.exp();
        let a = usize::from(a);
        Ok((beta[a] * scale, (gamma[a] * scale).max(GAMMA_FLOOR)))
    }

    /// `tau(L_c; l_p) = sum_a eta(L_c, a) gamma(L_c, a; l_p)`.
    pub fn tau(&self, lc: &Point, lp: &Point) -> Result<f64> {
        let eta = self.eta_pair(lc);
        let (_, g0) = self.beta_gamma(lc, 0, lp)?;
        let (_, g1) = self.beta_gamma(lc, 1, lp)?;
        Ok(eta[0] * g0 + eta[1] * g1)
    }

    /// `b_a1(L_c, a_obs, y)`: expectation of `xi(L_c, a; L_p)` under the
    /// complete-case law at `(L_c, a_obs, y)`.
    pub fn b_a1(&self, lc: &Point, a_obs: u8, y: f64, a: u8) -> Result<f64> {
        self.check_lc(lc)?;
        let cond = lc.with(Var::A, f64::from(a_obs)).with(Var::Y, y);
        let eta = self.eta_pair(lc);
        let nodes = self.both_outcome_nodes(lc);
        let mut lp = Vec::new();
        self.lp_nodes(&cond, &mut lp);
        let mut buf = Vec::new();
        Ok(lp
            .iter()
            .map(|(p, w)| w * self.ratios(&p.with(Var::A, f64::NAN).with(Var::Y, f64::NAN), eta, &nodes, &mut buf).0[usize::from(a)])
            .sum())
    }

    /// `b_a2(L_c, y)`: expectation of `(tau / gamma_a)(y - xi_a)` under the
    /// complete-case law at `(L_c, A = a, y)`.
    pub fn b_a2(&self, lc: &Point, y: f64, a: u8) -> Result<f64> {
        self.check_lc(lc)?;
        let cond = lc.with(Var::A, f64::from(a)).with(Var::Y, y);
        let eta = self.eta_pair(lc);
        let nodes = self.both_outcome_nodes(lc);
        let mut lp = Vec::new();
        self.lp_nodes(&cond, &mut lp);
        let mut buf = Vec::new();
        let ai = usize::from(a);
        Ok(lp
            .iter()
            .map(|(p, w)| {
                let (xi, tg) = self.ratios(p, eta, &nodes, &mut buf);
                w * tg[ai] * (y - xi[ai])
            })
            .sum())
    }

    /// Clipped `pi(L_c, A, Y)` and whether clipping applied.
    #[inline]
    pub fn pi_hat(&self, p: &Point) -> (f64, bool) {
        self.pi_clip.apply(self.pi.mean_at(p))
    }

    /// All per-record quantities of both estimators, for both target arms.
    pub fn row_terms(&self, rec: &CoarsenedRecord) -> Result<RowTerms> {
        let full = rec.point();
        let lc = lc_only(&full);
        let eta = self.eta_pair(&lc);
        let nodes = self.both_outcome_nodes(&lc);
        let (pi, pi_clipped) = self.pi_hat(&full);
        let a_obs = usize::from(rec.a);

        let cond = lc.with(Var::A, full.value(Var::A)).with(Var::Y, rec.y);
        let mut lp = Vec::new();
        self.lp_nodes(&cond, &mut lp);
        let mut buf = Vec::with_capacity(2 * nodes[0].y.len());
        let mut b1 = [0.0; 2];
        let mut b2 = 0.0;
        for (p, w) in &lp {
            let (xi, tg) = self.ratios(p, eta, &nodes, &mut buf);
            b1[0] += w * xi[0];
            b1[1] += w * xi[1];
            b2 += w * tg[a_obs] * (rec.y - xi[a_obs]);
        }

        let (xi, tog) = if rec.s {
            let lp_obs = self.merge_lp(&lc, &full)?;
            let (xi, tg) = self.ratios(&lp_obs, eta, &nodes, &mut buf);
            (Some(xi), Some(tg[a_obs]))
        } else {
            (None, None)
        };
        Ok(RowTerms { eta, pi, pi_clipped, b1, b2_observed_arm: b2, xi, tau_over_gamma_observed_arm: tog })
    }

    /// `xi(L_c, a; L_p)` for both arms at a complete case, and the clipped pi.
    pub fn xi_observed(&self, rec: &CoarsenedRecord) -> Result<Option<([f64; 2], f64, bool)>> {
        if !rec.s {
            return Ok(None);
        }
        let full = rec.point();
        let lc = lc_only(&full);
        let eta = self.eta_pair(&lc);
        let nodes = self.both_outcome_nodes(&lc);
        let lp = self.merge_lp(&lc, &full)?;
        let mut buf = Vec::new();
        let (xi, _) = self.ratios(&lp, eta, &nodes, &mut buf);
        let (pi, clipped) = self.pi_hat(&full);
        Ok(Some((xi, pi, clipped)))
    }

    /// Outcome nodes and probability weights used for `E_mu[. | L_c, a]`.
    pub fn outcome_quadrature(&self, lc: &Point, a: u8) -> (Vec<f64>, Vec<f64>) {
        let mut n = OutcomeNodes::default();
        self.outcome_nodes(lc, a, &mut n);
        (n.y, n.w)
    }

    fn check_lc(&self, lc: &Point) -> Result<()> {
        for f in &self.factors {
            for t in &f.model.terms {
                for v in t.vars() {
                    if v.is_complete_confounder() && lc.get(v).is_none() {
                        return Err(Error::Schema { var: v });
                    }
                }
            }
        }
        Ok(())
    }

    fn merge_lp(&self, lc: &Point, lp: &Point) -> Result<Point> {
        self.check_lc(lc)?;
        let mut p = lc_only(lc);
        for f in &self.factors {
            let v = lp.get(f.var).ok_or(Error::MissingData { var: f.var, row: 0 })?;
            p.set(f.var, v);
        }
        Ok(p)
    }

    /// `integral lambda(l_p | cond) d nu(l_p)` by the configured rules; one for a proper law.
    pub fn lambda_mass(&self, cond: &Point) -> f64 {
        let mut lp = Vec::new();
        self.lp_nodes(cond, &mut lp);
        lp.iter().map(|(_, w)| w).sum()
    }

    /// `lambda(l_p | L_c, a, y)` at a point carrying all of them.
    pub fn lambda_density(&self, p: &Point) -> f64 {
        self.log_lambda(p).exp()
    }
}

/// Copy of `p` keeping only L1..L3.
pub fn lc_only(p: &Point) -> Point {
    let mut out = Point::EMPTY;
    for v in LC {
        if let Some(x) = p.get(v) {
            out.set(v, x);
        }
    }
    out
}

fn fit_binary_or_glm(family: GlmFamily, terms: &[TermSpec], rows: &[&CoarsenedRecord], response: impl Fn(&CoarsenedRecord) -> f64, shape: ShapeEstimator) -> Result<FittedGlm> {
    let recs: Vec<CoarsenedRecord> = rows.iter().map(|r| **r).collect();
    let x = build_design(terms, &recs)?;
    let y: Vec<f64> = rows.iter().map(|r| response(r)).collect();
    fit_glm_with(family, terms, &x, &y, None, &GlmOptions { shape, ..Default::default() })
}

/// Fits every nuisance model on its legal subset: eta, mu, pi on all rows,
/// the complete-case models on `S = 1` rows only.
pub fn fit_nuisance_set(data: &[CoarsenedRecord], specs: &NuisanceSpecs, clip: ClipPolicy, settings: IntegrationSettings) -> Result<NuisanceSet> {
    specs.validate()?;
    if data.is_empty() {
        return Err(Error::domain("no records"));
    }
    let all: Vec<&CoarsenedRecord> = data.iter().collect();
    let complete: Vec<&CoarsenedRecord> = data.iter().filter(|r| r.s).collect();
    for arm in 0..2u8 {
        if !complete.iter().any(|r| r.a == arm) {
            return Err(Error::domain(format!("no complete cases in treatment arm {arm}")));
        }
    }
    for r in &complete {
        r.validate(specs.n_partial())?;
    }

    let eta = match &specs.eta {
        EtaSpec::Known { p_treated } => TreatmentModel::Known { p_treated: *p_treated },
        EtaSpec::Logistic { terms } => TreatmentModel::Fitted(fit_binary_or_glm(
            GlmFamily::Bernoulli,
            terms,
            &all,
            |r| f64::from(r.a),
            ShapeEstimator::Pearson,
        )?),
    };
    let mu = match &specs.mu {
        MuSpec::Gaussian { terms } => {
            OutcomeModel::Gaussian(fit_binary_or_glm(GlmFamily::Gaussian, terms, &all, |r| r.y, ShapeEstimator::Pearson)?)
        }
        MuSpec::BetaPerArm => {
            let arm = |a: u8| -> Result<BetaLaw> {
                let ys: Vec<f64> = data.iter().filter(|r| r.a == a).map(|r| r.y).collect();
                Ok(fit_beta_mle(&ys)?.law)
            };
            OutcomeModel::BetaPerArm([arm(0)?, arm(1)?])
        }
    };
    let pi = fit_binary_or_glm(GlmFamily::Bernoulli, &specs.pi, &all, |r| f64::from(u8::from(r.s)), ShapeEstimator::Pearson)?;
    let lambda1 = fit_binary_or_glm(
        specs.lambda1.family,
        &specs.lambda1.terms,
        &complete,
        |r| r.lp.map_or(f64::NAN, |lp| lp.l4),
        specs.lambda1.shape,
    )?;
    let lambda2 = match &specs.lambda2 {
        Some(spec) => Some(fit_binary_or_glm(
            spec.family,
            &spec.terms,
            &complete,
            |r| r.lp.and_then(|lp| lp.l5).unwrap_or(f64::NAN),
            spec.shape,
        )?),
        None => None,
    };
    NuisanceSet::from_models(eta, mu, pi, lambda1, lambda2, clip, settings)
}

impl NuisanceSet {
    /// True when any fitted component failed to converge.
    pub fn any_nonconverged(&self) -> bool {
        let eta_ok = match &self.eta {
            TreatmentModel::Fitted(m) => m.converged,
            TreatmentModel::Known { .. } => true,
        };
        let mu_ok = match &self.mu {
            OutcomeModel::Gaussian(m) => m.converged,
            OutcomeModel::BetaPerArm(_) => true,
        };
        !(eta_ok && mu_ok && self.pi.converged && self.lambda1.converged && self.lambda2.as_ref().is_none_or(|m| m.converged))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_fit::terms::TermSpec as T;

    fn gaussian_mu(mean_terms: Vec<T>, coefs: Vec<f64>, sd: f64) -> OutcomeModel {
        OutcomeModel::Gaussian(FittedGlm::fixed(GlmFamily::Gaussian, mean_terms, coefs, Some(sd)).unwrap())
    }

    fn logit(terms: Vec<T>, coefs: Vec<f64>) -> FittedGlm {
        FittedGlm::fixed(GlmFamily::Bernoulli, terms, coefs, None).unwrap()
    }

    fn lc() -> Point {
        Point::EMPTY.with(Var::L1, 1.0).with(Var::L2, 5.0).with(Var::L3, 0.0)
    }

    /// Gamma lambda with no Y dependence.
    fn set_without_y(clip: ClipPolicy) -> NuisanceSet {
        let lambda1 = FittedGlm::fixed(GlmFamily::Gamma, vec![T::Intercept, T::Main(Var::A), T::Main(Var::L1)], vec![0.8, 0.3, 0.1], Some(3.0)).unwrap();
        NuisanceSet::from_models(
            TreatmentModel::Fitted(logit(vec![T::Intercept, T::Main(Var::L1)], vec![-0.3, 0.4])),
            gaussian_mu(vec![T::Intercept, T::Main(Var::A), T::Main(Var::L2)], vec![-0.2, 0.1, 0.01], 0.1),
            logit(vec![T::Intercept], vec![1.0]),
            lambda1,
            None,
            clip,
            IntegrationSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn lambda_free_of_y_factors_out() {
        let ns = set_without_y(ClipPolicy::Off);
        let lp = Point::EMPTY.with(Var::L4, 2.0);
        for a in 0..2u8 {
            let (beta, gamma) = ns.beta_gamma(&lc(), a, &lp).unwrap();
            let dens = ns.lambda_density(&lc().with(Var::A, f64::from(a)).with(Var::Y, 0.0).with(Var::L4, 2.0));
            assert!((gamma - dens).abs() < 1e-12 * dens);
            let mean = -0.2 + 0.1 * f64::from(a) + 0.05;
            assert!((beta / gamma - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn b_a1_constant_in_y_without_y_terms() {
        let ns = set_without_y(ClipPolicy::Off);
        let v0 = ns.b_a1(&lc(), 1, -0.5, 0).unwrap();
        for y in [-0.3, 0.0, 0.2, 1.5] {
            assert!((ns.b_a1(&lc(), 1, y, 0).unwrap() - v0).abs() < 1e-12);
        }
        // xi doesn't depend on l_p here, so b_a1 is the mu mean; the gamma
        // floor perturbs far-tail Laguerre nodes slightly.
        assert!((v0 - (-0.2 + 0.05)).abs() < 1e-8, "{v0}");
    }

    #[test]
    fn lambda_integrates_to_one() {
        let ns = set_without_y(ClipPolicy::Off);
        for y in [-1.0, 0.0, 0.7] {
            let m = ns.lambda_mass(&lc().with(Var::A, 1.0).with(Var::Y, y));
            assert!((m - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn point_mass_outcome_limit() {
        let lambda1 = FittedGlm::fixed(GlmFamily::Gamma, vec![T::Intercept, T::Main(Var::Y)], vec![0.5, 1.0], Some(2.0)).unwrap();
        let m = -0.3;
        let ns = NuisanceSet::from_models(
            TreatmentModel::Known { p_treated: 0.5 },
            gaussian_mu(vec![T::Intercept], vec![m], 1e-9),
            logit(vec![T::Intercept], vec![0.0]),
            lambda1,
            None,
            ClipPolicy::Off,
            IntegrationSettings::default(),
        )
        .unwrap();
        let lp = Point::EMPTY.with(Var::L4, 1.3);
        let (beta, gamma) = ns.beta_gamma(&Point::EMPTY, 1, &lp).unwrap();
        let lam = ns.lambda_density(&Point::EMPTY.with(Var::A, 1.0).with(Var::Y, m).with(Var::L4, 1.3));
        assert!((gamma - lam).abs() < 1e-6 * lam);
        assert!((beta - m * lam).abs() < 1e-6 * lam);
    }

    #[test]
    fn tau_degenerate_and_symmetric_cases() {
        let lambda1 = FittedGlm::fixed(GlmFamily::Gamma, vec![T::Intercept, T::Main(Var::Y)], vec![0.5, 0.4], Some(2.0)).unwrap();
        let sym = NuisanceSet::from_models(
            TreatmentModel::Known { p_treated: 0.5 },
            gaussian_mu(vec![T::Intercept], vec![0.1], 0.2),
            logit(vec![T::Intercept], vec![0.0]),
            lambda1.clone(),
            None,
            ClipPolicy::Off,
            IntegrationSettings::default(),
        )
        .unwrap();
        let lp = Point::EMPTY.with(Var::L4, 1.1);
        let (_, g0) = sym.beta_gamma(&Point::EMPTY, 0, &lp).unwrap();
        let (_, g1) = sym.beta_gamma(&Point::EMPTY, 1, &lp).unwrap();
        assert!((g0 - g1).abs() < 1e-14);
        assert!((sym.tau(&Point::EMPTY, &lp).unwrap() - g0).abs() < 1e-14);

        let treated = NuisanceSet { eta: TreatmentModel::Known { p_treated: 1.0 }, ..sym };
        let (_, g1) = treated.beta_gamma(&Point::EMPTY, 1, &lp).unwrap();
        assert!((treated.tau(&Point::EMPTY, &lp).unwrap() - g1).abs() < 1e-15);
    }

    #[test]
    fn clip_policy() {
        let c = ClipPolicy::default();
        assert_eq!(c.apply(0.5), (0.5, false));
        assert_eq!(c.apply(0.999), (0.99, true));
        assert_eq!(ClipPolicy::Off.apply(0.999), (0.999, false));
    }

    #[test]
    fn conditioning_set_violations() {
        let ok = NuisanceSpecs {
            eta: EtaSpec::Logistic { terms: vec![T::Intercept, T::Main(Var::L1)] },
            mu: MuSpec::Gaussian { terms: vec![T::Intercept, T::Main(Var::A)] },
            pi: vec![T::Intercept, T::Main(Var::Y)],
            lambda1: LpSpec { family: GlmFamily::Gamma, terms: vec![T::Intercept, T::Main(Var::Y)], shape: ShapeEstimator::Pearson },
            lambda2: None,
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.eta = EtaSpec::Logistic { terms: vec![T::Intercept, T::Main(Var::L4)] };
        assert!(matches!(bad.validate(), Err(Error::ConditioningSet { var: Var::L4, .. })));
        let mut bad = ok.clone();
        bad.pi = vec![T::Intercept, T::Main(Var::L5)];
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.mu = MuSpec::Gaussian { terms: vec![T::Main(Var::Y)] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_complete_cases_is_an_error() {
        let data: Vec<CoarsenedRecord> = (0..20)
            .map(|i| CoarsenedRecord { lc: None, a: (i % 2) as u8, y: 0.1 * i as f64, s: false, lp: None })
            .collect();
        let specs = NuisanceSpecs {
            eta: EtaSpec::Known { p_treated: 0.5 },
            mu: MuSpec::Gaussian { terms: vec![T::Intercept, T::Main(Var::A)] },
            pi: vec![T::Intercept],
            lambda1: LpSpec { family: GlmFamily::Gamma, terms: vec![T::Intercept], shape: ShapeEstimator::Pearson },
            lambda2: None,
        };
        assert!(matches!(
            fit_nuisance_set(&data, &specs, ClipPolicy::Off, IntegrationSettings::default()),
            Err(Error::Domain(_))
        ));
    }
}
