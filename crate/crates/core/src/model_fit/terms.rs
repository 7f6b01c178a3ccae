//! Model terms (`intercept`, main effects, squares, pairwise products) and
//! design-matrix construction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::record::{CoarsenedRecord, Point, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermSpec {
    Intercept,
    Main(Var),
    Square(Var),
    Interaction(Var, Var),
}

impl TermSpec {
    /// Interaction with its two variables in canonical order.
    pub fn interaction(u: Var, v: Var) -> Result<Self> {
        if u == v {
            return Err(Error::config(format!("interaction {u}:{v} repeats a variable; use a square term")));
        }
        Ok(TermSpec::Interaction(u.min(v), u.max(v)))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        let (a, b) = match *self {
            TermSpec::Intercept => (None, None),
            TermSpec::Main(v) | TermSpec::Square(v) => (Some(v), None),
            TermSpec::Interaction(u, v) => (Some(u), Some(v)),
        };
        a.into_iter().chain(b)
    }

    pub fn involves(&self, v: Var) -> bool {
        self.vars().any(|u| u == v)
    }

    /// Evaluates the term; absent variables propagate as NaN.
    #[inline]
    pub fn eval(&self, p: &Point) -> f64 {
        match *self {
            TermSpec::Intercept => 1.0,
            TermSpec::Main(v) => p.value(v),
            TermSpec::Square(v) => {
                let x = p.value(v);
                x * x
            }
            TermSpec::Interaction(u, v) => p.value(u) * p.value(v),
        }
    }
}

impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermSpec::Intercept => f.write_str("(Intercept)"),
            TermSpec::Main(v) => write!(f, "{v}"),
            TermSpec::Square(v) => write!(f, "{v}^2"),
            TermSpec::Interaction(u, v) => write!(f, "{u}:{v}"),
        }
    }
}

impl FromStr for TermSpec {
    type Err = Error;

    /// Grammar: `(Intercept)`, `X`, `X^2`, `X:Z`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "(Intercept)" {
            return Ok(TermSpec::Intercept);
        }
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(TermSpec::Square(base.trim().parse()?));
        }
        if let Some((u, v)) = s.split_once(':') {
            return TermSpec::interaction(u.trim().parse()?, v.trim().parse()?);
        }
        s.parse().map(TermSpec::Main)
    }
}

impl Serialize for TermSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TermSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Checks the structural invariants of a term list: at most one intercept, no
/// duplicated terms.
pub fn validate_terms(terms: &[TermSpec]) -> Result<()> {
    if terms.iter().filter(|t| **t == TermSpec::Intercept).count() > 1 {
        return Err(Error::config("term list contains more than one intercept"));
    }
    for (i, t) in terms.iter().enumerate() {
        if terms[..i].contains(t) {
            return Err(Error::config(format!("duplicate term {t}")));
        }
    }
    Ok(())
}

/// Checks that every variable referenced by `terms` lies in `allowed`.
pub fn check_conditioning_set(model: &str, terms: &[TermSpec], allowed: &[Var]) -> Result<()> {
    for t in terms {
        for v in t.vars() {
            if !allowed.contains(&v) {
                return Err(Error::ConditioningSet { model: model.to_string(), var: v });
            }
        }
    }
    Ok(())
}

/// Intercept, main effects of `vars`, and all pairwise products of distinct `vars`.
pub fn pairwise_terms(vars: &[Var]) -> Vec<TermSpec> {
    let mut out = vec![TermSpec::Intercept];
    out.extend(vars.iter().map(|&v| TermSpec::Main(v)));
    for (i, &u) in vars.iter().enumerate() {
        for &v in &vars[i + 1..] {
            out.push(TermSpec::Interaction(u.min(v), u.max(v)));
        }
    }
    out
}

/// Intercept plus main effects.
pub fn main_terms(vars: &[Var]) -> Vec<TermSpec> {
    std::iter::once(TermSpec::Intercept).chain(vars.iter().map(|&v| TermSpec::Main(v))).collect()
}

/// Evaluates every term on a point, failing on absent variables.
pub fn design_row(terms: &[TermSpec], p: &Point, row: usize) -> Result<Vec<f64>> {
    terms
        .iter()
        .map(|t| {
            for v in t.vars() {
                if p.get(v).is_none() {
                    return Err(absent(v, row));
                }
            }
            Ok(t.eval(p))
        })
        .collect()
}

fn absent(v: Var, row: usize) -> Error {
    if v.is_partial_confounder() {
        Error::MissingData { var: v, row }
    } else {
        Error::Schema { var: v }
    }
}

/// Design matrix over records: row `i` holds every term evaluated on record `i`.
pub fn build_design(terms: &[TermSpec], records: &[CoarsenedRecord]) -> Result<DMatrix<f64>> {
    let points: Vec<Point> = records.iter().map(CoarsenedRecord::point).collect();
    build_design_points(terms, &points)
}

pub fn build_design_points(terms: &[TermSpec], points: &[Point]) -> Result<DMatrix<f64>> {
    let p = terms.len();
    let mut x = DMatrix::zeros(points.len(), p);
    for (i, pt) in points.iter().enumerate() {
        let row = design_row(terms, pt, i)?;
        for (j, v) in row.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{CompleteConfounders, PartialConfounders};

    fn record(l1: f64, l2: f64, l3: f64, l4: Option<f64>) -> CoarsenedRecord {
        CoarsenedRecord {
            lc: Some(CompleteConfounders { gender: l1, bmi: l2, hispanic: l3 }),
            a: 0,
            y: 0.0,
            s: l4.is_some(),
            lp: l4.map(|l4| PartialConfounders { l4, l5: None }),
        }
    }

    #[test]
    fn design_examples() {
        let x = build_design(&[TermSpec::Intercept, TermSpec::Main(Var::L2)], &[record(0.0, 3.0, 0.0, None)]).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0]);
        let x = build_design(&[TermSpec::Square(Var::L2)], &[record(0.0, -2.0, 0.0, None)]).unwrap();
        assert_eq!(x[(0, 0)], 4.0);
        let x = build_design(&[TermSpec::Interaction(Var::L1, Var::L3)], &[record(1.0, 0.0, 0.0, None)]).unwrap();
        assert_eq!(x[(0, 0)], 0.0);
    }

    #[test]
    fn absent_partial_confounder_is_missing_data() {
        let terms = [TermSpec::interaction(Var::L1, Var::L4).unwrap()];
        let recs = [record(1.0, 0.0, 0.0, Some(2.0)), record(1.0, 0.0, 0.0, None)];
        match build_design(&terms, &recs) {
            Err(Error::MissingData { var: Var::L4, row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absent_complete_confounder_is_schema_error() {
        let r = CoarsenedRecord { lc: None, a: 1, y: 0.5, s: false, lp: None };
        assert!(matches!(build_design(&[TermSpec::Main(Var::L1)], &[r]), Err(Error::Schema { var: Var::L1 })));
    }

    #[test]
    fn term_grammar() {
        for s in ["(Intercept)", "L2", "L2^2", "A:L1", "L3:L4"] {
            let t: TermSpec = s.parse().unwrap();
            let back: TermSpec = t.to_string().parse().unwrap();
            assert_eq!(t, back);
        }
        assert_eq!("L3:L1".parse::<TermSpec>().unwrap(), TermSpec::Interaction(Var::L1, Var::L3));
        assert!("L1:L1".parse::<TermSpec>().is_err());
        assert!("Q".parse::<TermSpec>().is_err());
        assert!(validate_terms(&[TermSpec::Intercept, TermSpec::Intercept]).is_err());
    }

    #[test]
    fn pairwise_enumeration() {
        let t = pairwise_terms(&[Var::A, Var::L1, Var::L2]);
        assert_eq!(t.len(), 1 + 3 + 3);
    }
}
