//! Coarsened observations and the flat covariate point used by design evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbolic covariate names. `L1..L3` are always observed, `L4`/`L5` are the
/// partially missing confounders, `A` is treatment and `Y` the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Var {
    L1,
    L2,
    L3,
    L4,
    L5,
    A,
    Y,
}

impl Var {
    pub const ALL: [Var; 7] = [Var::L1, Var::L2, Var::L3, Var::L4, Var::L5, Var::A, Var::Y];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_complete_confounder(self) -> bool {
        matches!(self, Var::L1 | Var::L2 | Var::L3)
    }

    pub fn is_partial_confounder(self) -> bool {
        matches!(self, Var::L4 | Var::L5)
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::L1 => "L1",
            Var::L2 => "L2",
            Var::L3 => "L3",
            Var::L4 => "L4",
            Var::L5 => "L5",
            Var::A => "A",
            Var::Y => "Y",
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Var {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Var::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variable `{s}`")))
    }
}

/// Values of a covariate point, indexed by [`Var::index`].
///
/// Absent entries are NaN; use [`Point::get`] for checked access.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point(pub [f64; 7]);

impl Point {
    pub const EMPTY: Point = Point([f64::NAN; 7]);

    #[inline]
    pub fn get(&self, v: Var) -> Option<f64> {
        let x = self.0[v.index()];
        (!x.is_nan()).then_some(x)
    }

    #[inline]
    pub fn set(&mut self, v: Var, x: f64) {
        self.0[v.index()] = x;
    }

    #[inline]
    pub fn with(mut self, v: Var, x: f64) -> Self {
        self.0[v.index()] = x;
        self
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.0[v.index()]
    }
}

/// Always-observed confounders: gender, centered baseline BMI, Hispanic ethnicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompleteConfounders {
    pub gender: f64,
    pub bmi: f64,
    pub hispanic: f64,
}

/// Partially missing confounders, present only on complete cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialConfounders {
    pub l4: f64,
    pub l5: Option<f64>,
}

/// One subject's coarsened observation `(L_c, A, Y, S, S * L_p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarsenedRecord {
    /// `None` for designs without always-observed confounders.
    pub lc: Option<CompleteConfounders>,
    pub a: u8,
    pub y: f64,
    pub s: bool,
    pub lp: Option<PartialConfounders>,
}

impl CoarsenedRecord {
    pub fn point(&self) -> Point {
        let mut p = Point::EMPTY;
        if let Some(lc) = &self.lc {
            p.set(Var::L1, lc.gender);
            p.set(Var::L2, lc.bmi);
            p.set(Var::L3, lc.hispanic);
        }
        p.set(Var::A, f64::from(self.a));
        p.set(Var::Y, self.y);
        if let Some(lp) = &self.lp {
            p.set(Var::L4, lp.l4);
            if let Some(l5) = lp.l5 {
                p.set(Var::L5, l5);
            }
        }
        p
    }

    pub fn treated(&self) -> bool {
        self.a == 1
    }

    /// Checks the coarsening contract: `s == 1` exactly when `L_p` is present
    /// with `n_partial` components.
    pub fn validate(&self, n_partial: usize) -> Result<()> {
        if self.a > 1 {
            return Err(Error::domain(format!("treatment must be 0/1, got {}", self.a)));
        }
        match (&self.lp, self.s) {
            (None, false) => Ok(()),
            (Some(lp), true) => {
                let got = 1 + usize::from(lp.l5.is_some());
                if got != n_partial {
                    return Err(Error::domain(format!(
                        "complete case carries {got} partial confounders, expected {n_partial}"
                    )));
                }
                Ok(())
            }
            (Some(_), false) => Err(Error::domain("incomplete case exposes partial confounders")),
            (None, true) => Err(Error::domain("complete case is missing partial confounders")),
        }
    }
}
