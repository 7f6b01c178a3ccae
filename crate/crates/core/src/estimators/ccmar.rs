//! The inverse-weighted outcome regression estimator and the one-step
//! influence-function estimator of `E[Y(a)]`, plus K-fold cross-fitting.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance_set, ClipPolicy, IntegrationSettings, NuisanceSet, NuisanceSpecs, RowTerms};
use crate::record::CoarsenedRecord;
use crate::rng;

/// Both CCMAR estimates for both arms from one pass over the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmarEstimates {
    /// `[chi_0, chi_1]` of the influence-function estimator.
    pub chi_if: [f64; 2],
    /// `[chi_0, chi_1]` of the IWOR estimator.
    pub chi_iwor: [f64; 2],
    /// Rows whose pi prediction was clipped.
    pub clipped: usize,
    pub nonconverged: bool,
}

impl CcmarEstimates {
    pub fn ate_if(&self) -> f64 {
        self.chi_if[1] - self.chi_if[0]
    }

    pub fn ate_iwor(&self) -> f64 {
        self.chi_iwor[1] - self.chi_iwor[0]
    }
}

/// Influence-function contribution of one row to `chi_a`.
#[inline]
pub fn if_contribution(t: &RowTerms, rec: &CoarsenedRecord, a: u8) -> f64 {
    let ai = usize::from(a);
    let b1 = t.b1[ai];
    let treated_as_a = rec.a == a;
    let (aug, b2) = if treated_as_a { (1.0 / t.eta[ai], t.b2_observed_arm) } else { (0.0, 0.0) };
    let mut v = b1 + aug * b2;
    if rec.s {
        let xi = t.xi.map_or(f64::NAN, |x| x[ai]);
        let inner = if treated_as_a {
            let tg = t.tau_over_gamma_observed_arm.unwrap_or(f64::NAN);
            aug * (tg * (rec.y - xi) - b2)
        } else {
            0.0
        };
        v += (xi - b1 + inner) / t.pi;
    }
    v
}

fn check_data(data: &[CoarsenedRecord]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::domain("no records to evaluate"));
    }
    Ok(())
}

/// `chi~_a = (1/n) sum S_i / pi(L_c, A, Y) * xi(L_c, a; L_p)`.
pub fn chi_iwor(ns: &NuisanceSet, data: &[CoarsenedRecord], a: u8) -> Result<f64> {
    Ok(iwor_both(ns, data)?.0[usize::from(a)])
}

fn iwor_both(ns: &NuisanceSet, data: &[CoarsenedRecord]) -> Result<([f64; 2], usize)> {
    check_data(data)?;
    let mut sum = [0.0; 2];
    let mut clipped = 0;
    for rec in data {
        if let Some((xi, pi, c)) = ns.xi_observed(rec)? {
            sum[0] += xi[0] / pi;
            sum[1] += xi[1] / pi;
            clipped += usize::from(c);
        }
    }
    let n = data.len() as f64;
    Ok(([sum[0] / n, sum[1] / n], clipped))
}

/// One-step estimator `chi^_a` (see [`if_contribution`]).
pub fn chi_if(ns: &NuisanceSet, data: &[CoarsenedRecord], a: u8) -> Result<f64> {
    Ok(ccmar_estimates(ns, data)?.chi_if[usize::from(a)])
}

/// Evaluates both estimators for both arms, sharing the per-row integrals.
pub fn ccmar_estimates(ns: &NuisanceSet, data: &[CoarsenedRecord]) -> Result<CcmarEstimates> {
    check_data(data)?;
    let mut s_if = [0.0; 2];
    let mut s_iwor = [0.0; 2];
    let mut clipped = 0;
    for rec in data {
        let t = ns.row_terms(rec)?;
        for a in 0..2u8 {
            s_if[usize::from(a)] += if_contribution(&t, rec, a);
        }
        if let Some(xi) = t.xi {
            s_iwor[0] += xi[0] / t.pi;
            s_iwor[1] += xi[1] / t.pi;
            clipped += usize::from(t.pi_clipped);
        }
    }
    let n = data.len() as f64;
    Ok(CcmarEstimates {
        chi_if: [s_if[0] / n, s_if[1] / n],
        chi_iwor: [s_iwor[0] / n, s_iwor[1] / n],
        clipped,
        nonconverged: ns.any_nonconverged(),
    })
}

/// IWOR only: skips the nested integrals the one-step estimator needs.
pub fn iwor_estimates(ns: &NuisanceSet, data: &[CoarsenedRecord]) -> Result<CcmarEstimates> {
    let (chi, clipped) = iwor_both(ns, data)?;
    Ok(CcmarEstimates { chi_if: [f64::NAN; 2], chi_iwor: chi, clipped, nonconverged: ns.any_nonconverged() })
}

/// Options shared by direct and cross-fitted CCMAR evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmarOptions {
    pub clip: ClipPolicy,
    pub settings: IntegrationSettings,
    /// Skip the one-step estimator when only IWOR is requested.
    pub iwor_only: bool,
}

impl Default for CcmarOptions {
    fn default() -> Self {
        CcmarOptions { clip: ClipPolicy::default(), settings: IntegrationSettings::default(), iwor_only: false }
    }
}

fn evaluate(ns: &NuisanceSet, data: &[CoarsenedRecord], opts: &CcmarOptions) -> Result<CcmarEstimates> {
    if opts.iwor_only {
        iwor_estimates(ns, data)
    } else {
        ccmar_estimates(ns, data)
    }
}

/// Fits the nuisances on `data` and evaluates on the same rows.
pub fn ccmar_direct(data: &[CoarsenedRecord], specs: &NuisanceSpecs, opts: &CcmarOptions) -> Result<CcmarEstimates> {
    let ns = fit_nuisance_set(data, specs, opts.clip, opts.settings)?;
    evaluate(&ns, data, opts)
}

/// Seeded fold labels: a shuffled index order dealt round-robin into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::from_key(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    fold_of
}

/// K-fold cross-fitting: nuisances fitted on the complement of each fold,
/// evaluated on the fold, fold estimates averaged.
pub fn crossfit_ate(data: &[CoarsenedRecord], specs: &NuisanceSpecs, folds: usize, seed: u64, opts: &CcmarOptions) -> Result<CcmarEstimates> {
    if folds < 2 {
        return Err(Error::config(format!("cross-fitting needs at least 2 folds, got {folds}")));
    }
    if data.len() < folds {
        return Err(Error::domain("fewer records than folds"));
    }
    crossfit_with_folds(data, specs, &record_folds(data, folds, seed), folds, opts)
}

/// Fold labels dealt over a canonical (content-sorted) order of the records,
/// so that reordering the input does not move any record between folds.
pub fn record_folds(data: &[CoarsenedRecord], folds: usize, seed: u64) -> Vec<usize> {
    let key = |r: &CoarsenedRecord| {
        let lc = r.lc.map_or([f64::NAN; 3], |c| [c.gender, c.bmi, c.hispanic]);
        let lp = r.lp.map_or([f64::NAN; 2], |p| [p.l4, p.l5.unwrap_or(f64::NAN)]);
        let mut k = [0u64; 8];
        for (slot, v) in k.iter_mut().zip(lc.iter().chain(&[f64::from(r.a), r.y, f64::from(u8::from(r.s))]).chain(&lp)) {
            *slot = v.to_bits();
        }
        k
    };
    let mut canon: Vec<usize> = (0..data.len()).collect();
    canon.sort_by_key(|&i| key(&data[i]));
    let labels = fold_assignment(data.len(), folds, seed);
    let mut fold_of = vec![0; data.len()];
    for (pos, &i) in canon.iter().enumerate() {
        fold_of[i] = labels[pos];
    }
    fold_of
}

/// Cross-fitting with an explicit fold label per record.
pub fn crossfit_with_folds(data: &[CoarsenedRecord], specs: &NuisanceSpecs, fold_of: &[usize], folds: usize, opts: &CcmarOptions) -> Result<CcmarEstimates> {
    if fold_of.len() != data.len() {
        return Err(Error::config("fold labels do not match the data length"));
    }
    let mut acc = CcmarEstimates { chi_if: [0.0; 2], chi_iwor: [0.0; 2], clipped: 0, nonconverged: false };
    for k in 0..folds {
        let (eval, train): (Vec<_>, Vec<_>) = data.iter().zip(fold_of).partition(|(_, &f)| f == k);
        let eval: Vec<CoarsenedRecord> = eval.into_iter().map(|(r, _)| *r).collect();
        let train: Vec<CoarsenedRecord> = train.into_iter().map(|(r, _)| *r).collect();
        if !eval.iter().any(|r| r.s) || !train.iter().any(|r| r.s) {
            return Err(Error::domain(format!("cross-fitting fold {k} has no complete cases")));
        }
        let ns = fit_nuisance_set(&train, specs, opts.clip, opts.settings)?;
        let e = evaluate(&ns, &eval, opts)?;
        for a in 0..2 {
            acc.chi_if[a] += e.chi_if[a] / folds as f64;
            acc.chi_iwor[a] += e.chi_iwor[a] / folds as f64;
        }
        acc.clipped += e.clipped;
        acc.nonconverged |= e.nonconverged;
    }
    Ok(acc)
}
