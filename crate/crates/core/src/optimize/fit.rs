//! Penalized maximum likelihood with alternating QP steps and REML updates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{sparse_basis, SparseBasisSpec};
use crate::error::{Error, Result};
use crate::optimize::constraints::{build_constraints, independence_coefficients, LinearConstraints};
use crate::optimize::qp::{solve_qp, QpProblem};
use crate::penalty::{assemble_penalty, PenaltyMatrix, DEFAULT_ORDER};

/// Smallest smoothing parameter the REML iteration may return.
const LAMBDA_FLOOR: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda_starts: Vec<f64>,
    pub max_outer_iters: usize,
    pub tol_coeff: f64,
    pub tol_lambda: f64,
    pub lambda_cap: f64,
    pub penalty_order: usize,
    /// When false, each start keeps its λ fixed.
    pub reml: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda_starts: vec![0.1, 1.0, 10.0],
            max_outer_iters: 50,
            tol_coeff: 1e-6,
            tol_lambda: 1e-4,
            lambda_cap: 1e10,
            penalty_order: DEFAULT_ORDER,
            reml: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_starts.is_empty() {
            return Err(Error::invalid("at least one lambda start is required"));
        }
        if self.lambda_starts.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("lambda starts must be positive and finite"));
        }
        if !(self.tol_coeff > 0.0 && self.tol_lambda > 0.0 && self.lambda_cap > 0.0) {
            return Err(Error::invalid("tolerances and lambda cap must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::invalid("max_outer_iters must be at least 1"));
        }
        Ok(())
    }

    /// A single fit at a fixed smoothing parameter.
    pub fn fixed_lambda(lambda: f64) -> Self {
        FitConfig {
            lambda_starts: vec![lambda],
            reml: false,
            ..FitConfig::default()
        }
    }
}

/// A fitted copula density on a sparse hierarchical basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaFit {
    pub spec: SparseBasisSpec,
    pub coeffs: Vec<f64>,
    pub lambda: f64,
    pub loglik: f64,
    pub df: f64,
    pub caic: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub lambda_capped: bool,
    pub n_obs: usize,
    pub penalty_order: usize,
}

impl CopulaFit {
    /// The independence copula on `spec`, with zero degrees of freedom.
    pub fn independence(spec: SparseBasisSpec) -> Result<CopulaFit> {
        Ok(CopulaFit {
            spec,
            coeffs: independence_coefficients(spec)?,
            lambda: 0.0,
            loglik: 0.0,
            df: 0.0,
            caic: 0.0,
            iterations: 0,
            converged: true,
            lambda_capped: false,
            n_obs: 0,
            penalty_order: DEFAULT_ORDER,
        })
    }
}

/// Row-compressed design matrix of basis evaluations.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    ncols: usize,
}

impl DesignMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut d = DesignMatrix {
            offsets: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            ncols: m.ncols(),
        };
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    d.cols.push(c as u32);
                    d.vals.push(v);
                }
            }
            d.offsets.push(d.cols.len());
        }
        d
    }

    /// Sparse basis rows at the observations `columns[axis][i]`.
    pub fn from_sparse_basis(columns: &[&[f64]], spec: SparseBasisSpec) -> Result<Self> {
        let basis = sparse_basis(spec)?;
        if columns.len() != spec.arity {
            return Err(Error::DimensionMismatch {
                expected: spec.arity,
                found: columns.len(),
            });
        }
        let n = columns[0].len();
        for c in columns {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
            for &u in c.iter() {
                if !(0.0..=1.0).contains(&u) {
                    return Err(Error::OutOfUnitInterval { value: u });
                }
            }
        }
        let mut d = DesignMatrix {
            offsets: Vec::with_capacity(n + 1),
            cols: Vec::new(),
            vals: Vec::new(),
            ncols: basis.dim(),
        };
        d.offsets.push(0);
        let mut point = vec![0.0; spec.arity];
        let mut nz = Vec::new();
        for i in 0..n {
            for (p, c) in point.iter_mut().zip(columns) {
                *p = c[i];
            }
            basis.row_nonzeros(&point, &mut nz);
            for &(c, v) in &nz {
                d.cols.push(c as u32);
                d.vals.push(v);
            }
            d.offsets.push(d.cols.len());
        }
        Ok(d)
    }

    pub fn nrows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    fn fitted(&self, b: &DVector<f64>) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&c, &v)| b[c as usize] * v).sum()
            })
            .collect()
    }

    /// Log-likelihood, or `None` when some fitted density is not positive.
    fn loglik(&self, b: &DVector<f64>) -> Option<f64> {
        let mut total = 0.0;
        for c in self.fitted(b) {
            if !(c > 0.0) {
                return None;
            }
            total += c.ln();
        }
        Some(total)
    }

    /// Score and observed information of the unpenalized log-likelihood.
    fn score_information(&self, b: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.ncols;
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        let fitted = self.fitted(b);
        for (i, &c) in fitted.iter().enumerate() {
            let (cols, vals) = self.row(i);
            let inv = 1.0 / c;
            let w = inv * inv;
            for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                g[ca as usize] += va * inv;
                let wa = va * w;
                for (&cb, &vb) in cols[a..].iter().zip(&vals[a..]) {
                    let (r, s) = (ca as usize, cb as usize);
                    let (r, s) = if r >= s { (r, s) } else { (s, r) };
                    h[(r, s)] += wa * vb;
                }
            }
        }
        // Only the lower triangle was accumulated (diagonal once).
        for r in 0..m {
            for s in 0..r {
                h[(s, r)] = h[(r, s)];
            }
        }
        (g, h)
    }
}

/// Result of one REML fixed-point step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlStep {
    pub lambda: f64,
    pub trace: f64,
    pub quadratic_form: f64,
    pub capped: bool,
}

/// `lambda = tr S(lambda) / (b' P b)` with `P` the unscaled penalty and
/// `S(lambda) = (U'H0U + lambda Lambda)^{-1} U'H0U` on the range of `P`.
pub fn reml_update(
    b_hat: &[f64],
    penalty: &PenaltyMatrix,
    hess0: &DMatrix<f64>,
    lambda_cap: f64,
) -> Result<RemlStep> {
    let m = penalty.dim();
    if b_hat.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: b_hat.len(),
        });
    }
    if hess0.nrows() != m || hess0.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: hess0.nrows(),
        });
    }
    let eig = penalty.range_eigen();
    let u = &eig.vectors;
    let a = u.transpose() * hess0 * u;
    let mut lhs = a.clone();
    for i in 0..eig.values.len() {
        lhs[(i, i)] += penalty.lambda * eig.values[i];
    }
    let s = lhs
        .lu()
        .solve(&a)
        .ok_or_else(|| Error::Singular("REML system U'H0U + lambda Lambda".into()))?;
    let trace = s.trace();
    let quadratic_form = penalty.quadratic_form(b_hat);
    if quadratic_form < 1e-14 {
        return Ok(RemlStep {
            lambda: lambda_cap,
            trace,
            quadratic_form,
            capped: true,
        });
    }
    let raw = trace / quadratic_form;
    Ok(RemlStep {
        lambda: raw.min(lambda_cap),
        trace,
        quadratic_form,
        capped: raw > lambda_cap,
    })
}

/// `tr[H_pen(lambda)^{-1} H_pen(0)]`.
pub fn effective_df(hess_pen_lambda: &DMatrix<f64>, hess_pen_zero: &DMatrix<f64>) -> Result<f64> {
    if hess_pen_lambda.shape() != hess_pen_zero.shape() || !hess_pen_lambda.is_square() {
        return Err(Error::DimensionMismatch {
            expected: hess_pen_lambda.nrows(),
            found: hess_pen_zero.nrows(),
        });
    }
    let solved = match hess_pen_lambda.clone().cholesky() {
        Some(ch) => ch.solve(hess_pen_zero),
        None => hess_pen_lambda
            .clone()
            .lu()
            .solve(hess_pen_zero)
            .ok_or_else(|| Error::Singular("penalized Hessian".into()))?,
    };
    let df = solved.trace();
    if !df.is_finite() {
        return Err(Error::Singular("penalized Hessian".into()));
    }
    Ok(df)
}

/// Corrected Akaike information criterion.
pub fn caic(loglik: f64, df: f64, n: usize) -> Result<f64> {
    let denom = n as f64 - df - 1.0;
    if denom <= 0.0 {
        return Err(Error::InsufficientData(format!(
            "cAIC needs n - df - 1 > 0 (n = {n}, df = {df:.3})"
        )));
    }
    Ok(-2.0 * loglik + 2.0 * df + 2.0 * df * (df + 1.0) / denom)
}

/// A penalized, constrained density estimation problem in arbitrary
/// coordinates.
#[derive(Debug, Clone)]
pub struct PenalizedProblem<'a> {
    pub design: &'a DesignMatrix,
    pub penalty: &'a PenaltyMatrix,
    pub constraints: &'a LinearConstraints,
    pub start: &'a [f64],
}

/// Raw outcome of [`PenalizedProblem::solve`] for one λ start.
#[derive(Debug, Clone)]
pub struct ProblemFit {
    pub coeffs: Vec<f64>,
    pub lambda: f64,
    pub loglik: f64,
    pub df: f64,
    pub caic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_capped: bool,
    /// Penalized log-likelihood after each accepted step, at the λ in force.
    pub trace: Vec<f64>,
}

fn penalized(design: &DesignMatrix, penalty: &PenaltyMatrix, lambda: f64, b: &DVector<f64>) -> Option<f64> {
    let ll = design.loglik(b)?;
    Some(ll - 0.5 * lambda * penalty.quadratic_form(b.as_slice()))
}

fn with_ridge(mut q: DMatrix<f64>) -> DMatrix<f64> {
    if q.clone().cholesky().is_some() {
        return q;
    }
    let scale = (0..q.nrows()).map(|i| q[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut ridge = 1e-10 * scale;
    loop {
        for i in 0..q.nrows() {
            q[(i, i)] += ridge;
        }
        if q.clone().cholesky().is_some() || ridge > scale {
            return q;
        }
        ridge *= 10.0;
    }
}

impl PenalizedProblem<'_> {
    fn validate(&self) -> Result<()> {
        let m = self.design.ncols();
        for (what, found) in [
            ("penalty", self.penalty.dim()),
            ("equalities", self.constraints.a_eq.ncols()),
            ("inequalities", self.constraints.a_ineq.ncols()),
            ("start", self.start.len()),
        ] {
            if found != m {
                return Err(Error::invalid(format!(
                    "{what} has {found} columns, design has {m}"
                )));
            }
        }
        if self.design.nrows() == 0 {
            return Err(Error::InsufficientData("no observations".into()));
        }
        Ok(())
    }

    /// Alternates QP steps on the quadratic expansion with REML updates,
    /// starting at `lambda0`.
    pub fn solve(&self, lambda0: f64, config: &FitConfig) -> Result<ProblemFit> {
        self.validate()?;
        config.validate()?;
        let design = self.design;
        let base = self.penalty.unscaled();
        let n = design.nrows();
        let mut b = DVector::from_column_slice(self.start);
        if design.loglik(&b).is_none() {
            return Err(Error::invalid("start coefficients give a nonpositive density at some observation"));
        }
        let mut lambda = lambda0;
        let mut converged = false;
        let mut capped = false;
        let mut iterations = 0;
        let mut trace = Vec::new();
        let cons = self.constraints;

        while iterations < config.max_outer_iters {
            iterations += 1;
            let (g, h0) = design.score_information(&b);
            let q = with_ridge(&h0 + base * lambda);
            let lin = &g + &h0 * &b;
            let qp = QpProblem {
                q,
                c: lin,
                a_eq: cons.a_eq.clone(),
                b_eq: cons.b_eq.clone(),
                a_ineq: cons.a_ineq.clone(),
                b_ineq: cons.b_ineq.clone(),
            };
            let target = solve_qp(&qp)?.x;

            let current = penalized(design, self.penalty, lambda, &b).unwrap_or(f64::NEG_INFINITY);
            let direction = &target - &b;
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let trial = &b + &direction * step;
                if let Some(v) = penalized(design, self.penalty, lambda, &trial) {
                    if v >= current - 1e-12 * current.abs().max(1.0) {
                        accepted = Some((trial, v));
                        break;
                    }
                }
                step *= 0.5;
            }
            let (b_new, value) = match accepted {
                Some(x) => x,
                None => (b.clone(), current),
            };
            trace.push(value);
            let coeff_change = (&b_new - &b).norm() / b.norm().max(1e-300);
            b = b_new;

            let mut lambda_change = 0.0;
            if config.reml {
                let (_, h0_new) = design.score_information(&b);
                let step = reml_update(
                    b.as_slice(),
                    &self.penalty.with_lambda(lambda),
                    &h0_new,
                    config.lambda_cap,
                )?;
                let new_lambda = step.lambda.max(LAMBDA_FLOOR);
                capped = step.capped;
                lambda_change = (new_lambda - lambda).abs() / lambda;
                lambda = new_lambda;
            }
            if coeff_change < config.tol_coeff && lambda_change < config.tol_lambda {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!(
                "penalized fit did not converge within {} iterations (lambda = {lambda:.4e})",
                config.max_outer_iters
            );
        }

        let loglik = design
            .loglik(&b)
            .ok_or_else(|| Error::Singular("fitted density vanishes at an observation".into()))?;
        let (_, h0) = design.score_information(&b);
        let df = effective_df(&(&h0 + base * lambda), &h0)?;
        let caic_value = caic(loglik, df, n)?;
        Ok(ProblemFit {
            coeffs: b.as_slice().to_vec(),
            lambda,
            loglik,
            df,
            caic: caic_value,
            iterations,
            converged,
            lambda_capped: capped,
            trace,
        })
    }

    /// Runs every λ start and keeps the lowest cAIC.
    pub fn solve_multistart(&self, config: &FitConfig) -> Result<ProblemFit> {
        config.validate()?;
        let mut best: Option<ProblemFit> = None;
        let mut last_err = None;
        for &l0 in &config.lambda_starts {
            match self.solve(l0, config) {
                Ok(fit) => {
                    if best.as_ref().is_none_or(|b| fit.caic < b.caic) {
                        best = Some(fit);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match (best, last_err) {
            (Some(b), _) => Ok(b),
            (None, Some(e)) => Err(e),
            (None, None) => unreachable!("validated config has at least one start"),
        }
    }
}

/// Fits a copula density to pseudo-observations given column-wise
/// (`columns[axis][i]`, one slice per copula argument).
pub fn fit_copula_density(
    columns: &[&[f64]],
    spec: SparseBasisSpec,
    config: &FitConfig,
) -> Result<CopulaFit> {
    spec.validate()?;
    config.validate()?;
    let design = DesignMatrix::from_sparse_basis(columns, spec)?;
    let n = design.nrows();
    let m = design.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} observations")));
    }
    if 2 * n < m {
        log::warn!("{n} observations for {m} basis functions; the fit may be degenerate");
    }
    let penalty = assemble_penalty(spec, config.penalty_order, config.lambda_starts[0])?;
    let constraints = build_constraints(spec)?;
    let start = independence_coefficients(spec)?;
    let problem = PenalizedProblem {
        design: &design,
        penalty: &penalty,
        constraints: &constraints,
        start: &start,
    };
    let best = problem.solve_multistart(config)?;
    Ok(CopulaFit {
        spec,
        coeffs: best.coeffs,
        lambda: best.lambda,
        loglik: best.loglik,
        df: best.df,
        caic: best.caic,
        iterations: best.iterations,
        converged: best.converged,
        lambda_capped: best.lambda_capped,
        n_obs: n,
        penalty_order: config.penalty_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn caic_arithmetic() {
        assert!((caic(0.0, 2.0, 100).unwrap() - (4.0 + 12.0 / 97.0)).abs() < 1e-12);
        assert_eq!(caic(-3.5, 0.0, 10).unwrap(), 7.0);
        assert!(caic(0.0, 9.0, 10).is_err());
    }

    #[test]
    fn reml_scalar_toy() {
        // P = 1, b = 1, H0 = 1, lambda = 1: tr S = 1/2, so lambda_hat = 1/2.
        let p = PenaltyMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
        let h = DMatrix::from_element(1, 1, 1.0);
        let step = reml_update(&[1.0], &p, &h, 1e10).unwrap();
        assert!((step.trace - 0.5).abs() < 1e-15);
        assert!((step.lambda - 0.5).abs() < 1e-15);
        assert!(!step.capped);
        let zero = reml_update(&[0.0], &p, &h, 1e6).unwrap();
        assert!(zero.capped);
        assert_eq!(zero.lambda, 1e6);
    }

    #[test]
    fn df_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 5;
        let x = DMatrix::from_fn(20, m, |_, _| rng.random::<f64>());
        let h0 = x.transpose() * &x;
        // penalty with a one-dimensional null space (constants)
        let l = crate::penalty::difference_matrix(m, 1).unwrap();
        let p = l.transpose() * l;
        assert!((effective_df(&h0, &h0).unwrap() - m as f64).abs() < 1e-10);
        let big = effective_df(&(&h0 + &p * 1e12), &h0).unwrap();
        assert!((big - 1.0).abs() < 1e-4, "{big}");
        let dfs: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&lam| effective_df(&(&h0 + &p * lam), &h0).unwrap())
            .collect();
        assert!(dfs[0] > dfs[1] && dfs[1] > dfs[2]);
    }

    fn uniform_sample(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..n).map(|_| rng.random::<f64>()).collect();
        let v = (0..n).map(|_| rng.random::<f64>()).collect();
        (u, v)
    }

    #[test]
    fn fit_respects_constraints_and_monotone_steps() {
        let (u, v) = uniform_sample(400, 11);
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        let design = DesignMatrix::from_sparse_basis(&[&u, &v], spec).unwrap();
        let penalty = assemble_penalty(spec, 1, 1.0).unwrap();
        let cons = build_constraints(spec).unwrap();
        let start = independence_coefficients(spec).unwrap();
        let problem = PenalizedProblem {
            design: &design,
            penalty: &penalty,
            constraints: &cons,
            start: &start,
        };
        let fit = problem.solve(1.0, &FitConfig::fixed_lambda(1.0)).unwrap();
        assert!(fit.converged);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        let b = DVector::from_vec(fit.coeffs.clone());
        assert!((&cons.a_eq * &b - &cons.b_eq).amax() < 1e-8);
        assert!((&cons.a_ineq * &b).min() >= -1e-10);
        assert!(fit.df > 0.0 && fit.df <= 25.0);
    }

    #[test]
    fn rejects_bad_input() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        let u = [0.2, 1.3];
        let v = [0.5, 0.5];
        assert!(fit_copula_density(&[&u, &v], spec, &FitConfig::default()).is_err());
        assert!(fit_copula_density(&[&u[..1], &v], spec, &FitConfig::default()).is_err());
        let bad = FitConfig {
            lambda_starts: vec![],
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
