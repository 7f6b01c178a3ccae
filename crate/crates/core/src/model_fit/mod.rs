//! Numeric substrate: design matrices, GLM and LASSO fitting, the Beta
//! outcome law, and fixed-node quadrature.

pub mod beta;
pub mod glm;
pub mod lasso;
pub mod quadrature;
pub mod special;
pub mod terms;

pub use beta::{beta_moment_start, fit_beta_mle, BetaFit, BetaLaw};
pub use glm::{fit_glm, fit_glm_with, glm_predict, FittedGlm, GlmFamily, GlmOptions, Penalty, ShapeEstimator};
pub use lasso::{fit_lasso_glm, fit_lasso_glm_with, LassoOptions};
pub use quadrature::{expect_gamma, expect_outcome, OutcomeLaw, QuadratureKind, QuadratureRule};
pub use terms::{build_design, TermSpec};
