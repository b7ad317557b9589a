//! Constrained penalized maximum likelihood for spline copula densities.

pub mod constraints;
pub mod fit;
pub mod qp;

pub use constraints::{build_constraints, independence_coefficients, LinearConstraints};
pub use fit::{
    caic, effective_df, fit_copula_density, reml_update, CopulaFit, DesignMatrix, FitConfig,
    PenalizedProblem, ProblemFit, RemlStep,
};
pub use qp::{solve_qp, QpProblem, QpSolution};
