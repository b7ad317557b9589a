//! Evaluation of fitted copula densities and their conditional distribution
//! functions.
//!
//! For fixed values of the other arguments a fitted density is piecewise
//! linear in each argument with breakpoints on `knot_grid(d)`, so partial
//! integrals are exact piecewise quadratics.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{knot_grid, sparse_basis, SparseBasis};
use crate::error::{Error, Result};
use crate::optimize::CopulaFit;

static CLIP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of h-function evaluations that had to clip a negative density.
pub fn clip_events() -> u64 {
    CLIP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_clip_events() {
    CLIP_EVENTS.store(0, Ordering::Relaxed);
}

/// Arguments of a pair-copula density, with the conditioning value `w` for
/// conditional (three-argument) fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub u: f64,
    pub v: f64,
    pub w: Option<f64>,
}

impl EvalPoint {
    pub fn new(u: f64, v: f64) -> Self {
        EvalPoint { u, v, w: None }
    }

    pub fn conditional(u: f64, v: f64, w: f64) -> Self {
        EvalPoint { u, v, w: Some(w) }
    }
}

/// Which argument an h-function integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Along {
    /// `h(u | v) = int_0^u c(s, v) ds`
    First,
    /// `h(v | u) = int_0^v c(u, s) ds`
    Second,
}

fn check_unit(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfUnitInterval { value: x })
    }
}

/// Clipped integral of a linear segment with end values `a`, `b` over the
/// fraction `[0, s]` of a unit-length interval.
fn clipped_partial(a: f64, b: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let end = a + (b - a) * s;
    if a >= 0.0 && end >= 0.0 {
        return 0.5 * (a + end) * s;
    }
    if a <= 0.0 && end <= 0.0 {
        return 0.0;
    }
    // one sign change at x0 in (0, s)
    let x0 = a / (a - b);
    if a > 0.0 {
        0.5 * a * x0
    } else {
        0.5 * end * (s - x0)
    }
}

/// Fitted copula bound to its basis for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    pub fit: &'a CopulaFit,
    basis: Arc<SparseBasis>,
    knots: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(fit: &'a CopulaFit) -> Result<Self> {
        let basis = sparse_basis(fit.spec)?;
        if fit.coeffs.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                found: fit.coeffs.len(),
            });
        }
        Ok(Evaluator {
            fit,
            basis,
            knots: knot_grid(fit.spec.d).knots,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.fit.spec.arity == 3
    }

    fn check_w(&self, w: Option<f64>) -> Result<()> {
        match (self.is_conditional(), w) {
            (true, None) => Err(Error::Conditioning(
                "conditional copula needs a conditioning value".into(),
            )),
            (false, Some(_)) => Err(Error::Conditioning(
                "unconditional copula takes no conditioning value".into(),
            )),
            (_, Some(w)) => check_unit(w),
            _ => Ok(()),
        }
    }

    fn raw(&self, u: f64, v: f64, w: Option<f64>, nz: &mut Vec<(usize, f64)>) -> f64 {
        let pt = [u, v, w.unwrap_or(0.0)];
        self.basis.row_nonzeros(&pt[..self.fit.spec.arity], nz);
        nz.iter().map(|&(c, x)| self.fit.coeffs[c] * x).sum()
    }

    /// Density at `p`, clipped at zero.
    pub fn density(&self, p: &EvalPoint) -> Result<f64> {
        check_unit(p.u)?;
        check_unit(p.v)?;
        self.check_w(p.w)?;
        let mut nz = Vec::with_capacity(64);
        Ok(self.raw(p.u, p.v, p.w, &mut nz).max(0.0))
    }

    /// Unclipped density values at the knots along the integration axis.
    fn line(&self, along: Along, given: f64, w: Option<f64>) -> Vec<f64> {
        let mut nz = Vec::with_capacity(64);
        self.knots
            .iter()
            .map(|&t| match along {
                Along::First => self.raw(t, given, w, &mut nz),
                Along::Second => self.raw(given, t, w, &mut nz),
            })
            .collect()
    }

    /// Cumulative clipped integrals at the knots (unnormalized) and whether
    /// clipping happened.
    fn cumulative(&self, vals: &[f64]) -> (Vec<f64>, bool) {
        let h = 1.0 / (vals.len() - 1) as f64;
        let mut cum = Vec::with_capacity(vals.len());
        cum.push(0.0);
        let mut clipped = false;
        for seg in vals.windows(2) {
            if seg[0] < 0.0 || seg[1] < 0.0 {
                clipped = true;
            }
            let last = *cum.last().expect("nonempty");
            cum.push(last + h * clipped_partial(seg[0], seg[1], 1.0));
        }
        (cum, clipped)
    }

    fn prepare(&self, along: Along, given: f64, w: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        check_unit(given)?;
        self.check_w(w)?;
        let vals = self.line(along, given, w);
        let (cum, clipped) = self.cumulative(&vals);
        if clipped {
            CLIP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        let total = *cum.last().expect("nonempty");
        if !(total > 1e-300) {
            return Err(Error::NonMonotone { given });
        }
        Ok((vals, cum))
    }

    /// Conditional distribution function, normalized to reach one at the
    /// right end.
    pub fn h(&self, along: Along, target: f64, given: f64, w: Option<f64>) -> Result<f64> {
        check_unit(target)?;
        let (vals, cum) = self.prepare(along, given, w)?;
        let segments = vals.len() - 1;
        let total = cum[segments];
        let x = target * segments as f64;
        let k = (x.floor() as usize).min(segments - 1);
        let s = x - k as f64;
        let h = 1.0 / segments as f64;
        let value = cum[k] + h * clipped_partial(vals[k], vals[k + 1], s);
        Ok((value / total).clamp(0.0, 1.0))
    }

    /// Inverse of [`Evaluator::h`] in its first argument.
    pub fn h_inverse(&self, along: Along, prob: f64, given: f64, w: Option<f64>) -> Result<f64> {
        check_unit(prob)?;
        let (vals, cum) = self.prepare(along, given, w)?;
        let segments = vals.len() - 1;
        let total = cum[segments];
        let h = 1.0 / segments as f64;
        let goal = prob * total;
        if prob <= 0.0 {
            return Ok(0.0);
        }
        if prob >= 1.0 {
            return Ok(1.0);
        }
        // first segment whose right cumulative value reaches the goal
        let k = cum[1..].partition_point(|&c| c < goal).min(segments - 1);
        let need = (goal - cum[k]) / h;
        let (a, b) = (vals[k], vals[k + 1]);
        let s = if a >= 0.0 && b >= 0.0 {
            // a s + (b - a) s^2 / 2 = need
            let slope = b - a;
            if slope.abs() < 1e-14 * a.abs().max(1e-300) {
                need / a
            } else {
                let disc = (a * a + 2.0 * slope * need).max(0.0);
                2.0 * need / (a + disc.sqrt())
            }
        } else {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if clipped_partial(a, b, mid) < need {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-16 {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        Ok(((k as f64 + s.clamp(0.0, 1.0)) * h).clamp(0.0, 1.0))
    }
}

/// Fitted density at `point`, clipped at zero.
pub fn density_eval(fit: &CopulaFit, point: &EvalPoint) -> Result<f64> {
    Evaluator::new(fit)?.density(point)
}

/// Conditional distribution function of the `along` argument given the
/// other one (and `w` for conditional fits).
pub fn h_function(fit: &CopulaFit, along: Along, target: f64, given: f64, w: Option<f64>) -> Result<f64> {
    Evaluator::new(fit)?.h(along, target, given, w)
}

/// Inverse of [`h_function`] in `target`.
pub fn h_inverse(fit: &CopulaFit, along: Along, prob: f64, given: f64, w: Option<f64>) -> Result<f64> {
    Evaluator::new(fit)?.h_inverse(along, prob, given, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SparseBasisSpec;

    fn tilted(spec: SparseBasisSpec) -> CopulaFit {
        // independence plus a small admissible perturbation: the density
        // 1 + eps (2u - 1)(2v - 1) lies in every basis with d >= 1
        let mut fit = CopulaFit::independence(spec).unwrap();
        let basis = sparse_basis(spec).unwrap();
        let eps = 0.4;
        for c in 0..basis.dim() {
            let mi = basis.multi_index(c);
            if mi.iter().all(|&k| k <= 1) {
                let s0 = if mi[0] == 1 { 1.0 } else { -1.0 };
                let s1 = if mi[1] == 1 { 1.0 } else { -1.0 };
                fit.coeffs[c] += 0.5f64.powi(spec.arity as i32) * eps * s0 * s1;
            }
        }
        fit
    }

    #[test]
    fn independence_is_flat() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        let fit = CopulaFit::independence(spec).unwrap();
        let ev = Evaluator::new(&fit).unwrap();
        for &(u, v) in &[(0.0, 0.0), (0.3, 0.7), (1.0, 0.5), (0.123, 0.999)] {
            assert!((ev.density(&EvalPoint::new(u, v)).unwrap() - 1.0).abs() < 1e-13);
            assert!((ev.h(Along::First, u, v, None).unwrap() - u).abs() < 1e-13);
            assert!((ev.h_inverse(Along::Second, v, u, None).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_density_closed_form() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        let fit = tilted(spec);
        let ev = Evaluator::new(&fit).unwrap();
        let (u, v) = (0.3, 0.8);
        let want = 1.0 + 0.4 * (2.0 * u - 1.0) * (2.0 * v - 1.0);
        assert!((ev.density(&EvalPoint::new(u, v)).unwrap() - want).abs() < 1e-12);
        // h(u|v) = u + eps (2v - 1)(u^2 - u)
        let h = ev.h(Along::First, u, v, None).unwrap();
        assert!((h - (u + 0.4 * (2.0 * v - 1.0) * (u * u - u))).abs() < 1e-12);
        let back = ev.h_inverse(Along::First, h, v, None).unwrap();
        assert!((back - u).abs() < 1e-12);
    }

    #[test]
    fn conditioning_value_is_checked() {
        let spec2 = SparseBasisSpec::new(2, 4, 2).unwrap();
        let spec3 = SparseBasisSpec::new(2, 4, 3).unwrap();
        let f2 = CopulaFit::independence(spec2).unwrap();
        let f3 = CopulaFit::independence(spec3).unwrap();
        assert!(density_eval(&f2, &EvalPoint::conditional(0.5, 0.5, 0.5)).is_err());
        assert!(density_eval(&f3, &EvalPoint::new(0.5, 0.5)).is_err());
        assert!((density_eval(&f3, &EvalPoint::conditional(0.2, 0.5, 0.9)).unwrap() - 1.0).abs() < 1e-13);
        assert!(h_function(&f3, Along::First, 0.4, 0.5, Some(0.1)).is_ok());
        assert!(h_function(&f2, Along::First, 1.4, 0.5, None).is_err());
    }

    #[test]
    fn clipping_keeps_h_monotone() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        let mut fit = tilted(spec);
        // push the tilt past admissibility so the density goes negative
        for c in fit.coeffs.iter_mut().filter(|c| **c != 0.0) {
            *c = 0.25 + (*c - 0.25) * 3.0;
        }
        let ev = Evaluator::new(&fit).unwrap();
        reset_clip_events();
        let mut prev = 0.0;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let h = ev.h(Along::First, t, 0.05, None).unwrap();
            assert!(h >= prev - 1e-15);
            prev = h;
        }
        assert!((prev - 1.0).abs() < 1e-12);
        assert!(clip_events() > 0);
        let p = ev.h(Along::First, 0.9, 0.05, None).unwrap();
        let back = ev.h_inverse(Along::First, p, 0.05, None).unwrap();
        assert!((back - 0.9).abs() < 1e-9);
    }

    #[test]
    fn partial_integral_pieces() {
        assert_eq!(clipped_partial(1.0, 1.0, 0.5), 0.5);
        assert_eq!(clipped_partial(-1.0, -2.0, 1.0), 0.0);
        assert!((clipped_partial(1.0, -1.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((clipped_partial(-1.0, 1.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((clipped_partial(-1.0, 1.0, 0.75) - 0.0625).abs() < 1e-15);
    }
}
