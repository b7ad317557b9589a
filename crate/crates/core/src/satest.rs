//! Test of the simplifying assumption for one vine edge.
//!
//! Observations are split into groups by quantiles of the conditioning
//! variable. Each group contributes Kendall's τ and the lower-left quadrant
//! probability `P(U < 1/2, V < 1/2)` with a jackknife covariance; the
//! statistic is the sum of Mahalanobis distances of the group summaries
//! from their precision-weighted pooled value, referred to a chi-square law
//! with `2 (G - 1)` degrees of freedom.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

pub const MIN_GROUP_SIZE: usize = 50;
pub const DEFAULT_GROUPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// Range of the conditioning variable within the group.
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub tau: f64,
    pub quadrant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaTestResult {
    pub statistic: f64,
    pub df: usize,
    pub pvalue: f64,
    pub alpha: f64,
    pub reject: bool,
    pub groups: Vec<GroupSummary>,
}

struct Summary {
    theta: Vector2<f64>,
    cov: Matrix2<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Kendall's τ of paired samples (O(n²), exact with ties counted as zero).
pub fn kendall_tau(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sign(u[i] - u[j]) * sign(v[i] - v[j]);
        }
    }
    2.0 * s / (n as f64 * (n as f64 - 1.0))
}

fn summarize(u: &[f64], v: &[f64]) -> Summary {
    let n = u.len();
    let nf = n as f64;
    let mut per = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = sign(u[i] - u[j]) * sign(v[i] - v[j]);
            per[i] += s;
            per[j] += s;
        }
    }
    let total: f64 = per.iter().sum::<f64>() / 2.0;
    let tau = 2.0 * total / (nf * (nf - 1.0));
    let hits: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| if a < 0.5 && b < 0.5 { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = hits.iter().sum();
    let quadrant = count / nf;

    // leave-one-out replicates
    let loo: Vec<Vector2<f64>> = (0..n)
        .map(|i| {
            Vector2::new(
                2.0 * (total - per[i]) / ((nf - 1.0) * (nf - 2.0)),
                (count - hits[i]) / (nf - 1.0),
            )
        })
        .collect();
    let mean = loo.iter().fold(Vector2::zeros(), |a, x| a + x) / nf;
    let mut cov = Matrix2::zeros();
    for x in &loo {
        let d = x - mean;
        cov += d * d.transpose();
    }
    cov *= (nf - 1.0) / nf;
    Summary {
        theta: Vector2::new(tau, quadrant),
        cov,
    }
}

/// Tests whether the copula of `(u, v)` varies with `cond`, using `groups`
/// quantile groups of `cond`.
pub fn test_simplifying_groups(u: &[f64], v: &[f64], cond: &[f64], alpha: f64, groups: usize) -> Result<SaTestResult> {
    let n = u.len();
    if v.len() != n || cond.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if v.len() != n { v.len() } else { cond.len() },
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if groups < 2 {
        return Err(Error::invalid("at least two groups are required"));
    }
    if n < groups * MIN_GROUP_SIZE {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {groups} groups of at least {MIN_GROUP_SIZE}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cond[a].total_cmp(&cond[b]).then(a.cmp(&b)));

    let mut summaries = Vec::with_capacity(groups);
    let mut described = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * n / groups;
        let hi = (g + 1) * n / groups;
        let idx = &order[lo..hi];
        let gu: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
        let gv: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let s = summarize(&gu, &gv);
        described.push(GroupSummary {
            lower: cond[idx[0]],
            upper: cond[idx[idx.len() - 1]],
            n: idx.len(),
            tau: s.theta[0],
            quadrant: s.theta[1],
        });
        summaries.push(s);
    }

    let mut precisions = Vec::with_capacity(groups);
    for s in &summaries {
        let p = s.cov.try_inverse().ok_or_else(|| {
            Error::InsufficientData("degenerate group dependence summary".into())
        })?;
        precisions.push(p);
    }
    let pooled_precision = precisions.iter().fold(Matrix2::zeros(), |a, p| a + p);
    let weighted = precisions
        .iter()
        .zip(&summaries)
        .fold(Vector2::zeros(), |a, (p, s)| a + p * s.theta);
    let pooled = pooled_precision
        .try_inverse()
        .ok_or_else(|| Error::InsufficientData("degenerate pooled summary".into()))?
        * weighted;
    let statistic: f64 = precisions
        .iter()
        .zip(&summaries)
        .map(|(p, s)| {
            let d = s.theta - pooled;
            (d.transpose() * p * d)[(0, 0)]
        })
        .sum();
    let df = 2 * (groups - 1);
    let chi = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    let pvalue = chi.sf(statistic).clamp(0.0, 1.0);
    Ok(SaTestResult {
        statistic,
        df,
        pvalue,
        alpha,
        reject: pvalue < alpha,
        groups: described,
    })
}

/// [`test_simplifying_groups`] with a median split.
pub fn test_simplifying(u: &[f64], v: &[f64], cond: &[f64], alpha: f64) -> Result<SaTestResult> {
    test_simplifying_groups(u, v, cond, alpha, DEFAULT_GROUPS)
}
