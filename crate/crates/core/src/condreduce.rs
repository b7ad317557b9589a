//! Standardized ranks and the reduction of a conditioning set to the ranks
//! of its first principal component.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranks divided by `n + 1`, ties receiving their average rank.
pub fn standardized_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; n];
    let denom = (n + 1) as f64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = avg / denom;
        }
        start = end;
    }
    out
}

/// First-principal-component reduction of conditioning columns, with what
/// is needed to map new observations onto the training rank scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReduction {
    pub loading: Vec<f64>,
    pub means: Vec<f64>,
    /// Training scores `loading . (x - means)`.
    pub scores: Vec<f64>,
    /// Conditioning values used in fitting.
    pub reduced: Vec<f64>,
    /// Sorted distinct training scores and their standardized ranks.
    pub rank_map: Vec<(f64, f64)>,
}

impl ConditioningReduction {
    /// Whether the reduction is the identity on a single column.
    pub fn is_identity(&self) -> bool {
        self.loading.len() == 1
    }

    /// Conditioning value for a new observation of the conditioning columns.
    pub fn project(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.loading.len() {
            return Err(Error::DimensionMismatch {
                expected: self.loading.len(),
                found: x.len(),
            });
        }
        if self.is_identity() {
            return Ok(x[0]);
        }
        let s: f64 = self
            .loading
            .iter()
            .zip(x)
            .zip(&self.means)
            .map(|((l, v), m)| l * (v - m))
            .sum();
        Ok(interpolate(&self.rank_map, s))
    }
}

fn interpolate(map: &[(f64, f64)], s: f64) -> f64 {
    let first = map[0];
    let last = map[map.len() - 1];
    if s <= first.0 {
        return first.1;
    }
    if s >= last.0 {
        return last.1;
    }
    let k = map.partition_point(|p| p.0 <= s);
    let (x0, y0) = map[k - 1];
    let (x1, y1) = map[k];
    y0 + (y1 - y0) * (s - x0) / (x1 - x0)
}

/// Reduces conditioning columns (`columns[k][i]`) to the standardized ranks
/// of their first principal component. A single column is passed through.
pub fn reduce_conditioners(columns: &[&[f64]]) -> Result<ConditioningReduction> {
    let k = columns.len();
    if k == 0 {
        return Err(Error::Conditioning("empty conditioning set".into()));
    }
    let n = columns[0].len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} observations")));
    }
    for c in columns {
        if c.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: c.len(),
            });
        }
    }
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, k, |i, j| columns[j][i] - means[j]);
    if centered.amax() == 0.0 {
        return Err(Error::Conditioning("conditioning columns have zero variance".into()));
    }
    let loading = if k == 1 {
        vec![1.0]
    } else {
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let mut l: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        let pivot = l
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("nonempty loading");
        if l[pivot] < 0.0 {
            l.iter_mut().for_each(|x| *x = -*x);
        }
        let norm = l.iter().map(|x| x * x).sum::<f64>().sqrt();
        l.iter_mut().for_each(|x| *x /= norm);
        l
    };
    let scores: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| loading[j] * centered[(i, j)]).sum())
        .collect();
    let reduced = if k == 1 { columns[0].to_vec() } else { standardized_ranks(&scores) };
    let ranks = standardized_ranks(&scores);
    let mut pairs: Vec<(f64, f64)> = scores.iter().copied().zip(ranks).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.dedup_by(|a, b| a.0 == b.0);
    Ok(ConditioningReduction {
        loading,
        means,
        scores,
        reduced,
        rank_map: pairs,
    })
}
