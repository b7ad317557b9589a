use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::basis::{knot_grid, sparse_basis, SparseBasisSpec};
use crate::error::Result;

/// Linear side conditions on sparse coefficients:
/// `a_eq b = b_eq` (uniform margins) and `a_ineq b >= b_ineq` (nonnegativity).
#[derive(Debug, Clone)]
pub struct LinearConstraints {
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    /// Equality rows before redundant ones were dropped.
    pub eq_rows_total: usize,
}

/// Indices of a maximal linearly independent subset of `rows`, kept in
/// input order (greedy Gram-Schmidt with reorthogonalization).
pub(crate) fn independent_rows(rows: &[Vec<f64>], rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for _ in 0..2 {
            for e in &basis {
                let proj: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= proj * ei;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > rel_tol * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            keep.push(i);
        }
    }
    keep
}

fn build(spec: SparseBasisSpec) -> Result<LinearConstraints> {
    let basis = sparse_basis(spec)?;
    let m = basis.dim();
    let k = basis.knots_per_axis();
    let q = spec.arity;
    let knots = knot_grid(spec.d).knots;

    // Univariate hierarchical values at the knots: uni[c][t].
    let uni: Vec<Vec<f64>> = (0..k)
        .map(|c| knots.iter().map(|&t| basis.univariate(c, t)).collect())
        .collect();

    // Every hierarchical column integrates to one, so integrating out `axis`
    // leaves the product over the remaining axes.
    let mut eq_rows = Vec::new();
    let margin_axes: &[usize] = &[0, 1];
    for &axis in margin_axes {
        let others: Vec<usize> = (0..q).filter(|&a| a != axis).collect();
        let grid_points = k.pow(others.len() as u32);
        for g in 0..grid_points {
            let mut t_idx = vec![0usize; others.len()];
            let mut rem = g;
            for slot in (0..others.len()).rev() {
                t_idx[slot] = rem % k;
                rem /= k;
            }
            let row: Vec<f64> = (0..m)
                .map(|col| {
                    let mi = basis.multi_index(col);
                    others
                        .iter()
                        .zip(&t_idx)
                        .map(|(&ax, &t)| uni[mi[ax] as usize][t])
                        .product()
                })
                .collect();
            eq_rows.push(row);
        }
    }
    let eq_rows_total = eq_rows.len();
    let keep = independent_rows(&eq_rows, 1e-9);
    let mut a_eq = DMatrix::zeros(keep.len(), m);
    for (r, &i) in keep.iter().enumerate() {
        for c in 0..m {
            a_eq[(r, c)] = eq_rows[i][c];
        }
    }
    let b_eq = DVector::from_element(keep.len(), 1.0);

    // Density at every point of the full q-dimensional knot grid. The fitted
    // density is multilinear on each grid cell, so this bounds it globally.
    let points = k.pow(q as u32);
    let mut a_ineq = DMatrix::zeros(points, m);
    let mut t_idx = vec![0usize; q];
    for g in 0..points {
        let mut rem = g;
        for slot in (0..q).rev() {
            t_idx[slot] = rem % k;
            rem /= k;
        }
        for col in 0..m {
            let mi = basis.multi_index(col);
            a_ineq[(g, col)] = (0..q).map(|ax| uni[mi[ax] as usize][t_idx[ax]]).product();
        }
    }
    let b_ineq = DVector::zeros(points);
    Ok(LinearConstraints {
        a_eq,
        b_eq,
        a_ineq,
        b_ineq,
        eq_rows_total,
    })
}

/// Margin-uniformity equalities and knot-grid nonnegativity for a spec.
pub fn build_constraints(spec: SparseBasisSpec) -> Result<Arc<LinearConstraints>> {
    type Cache = Mutex<HashMap<SparseBasisSpec, Arc<LinearConstraints>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    spec.validate()?;
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().expect("constraint cache poisoned").get(&spec) {
        return Ok(Arc::clone(c));
    }
    let built = Arc::new(build(spec)?);
    let mut guard = cache.lock().expect("constraint cache poisoned");
    Ok(Arc::clone(guard.entry(spec).or_insert(built)))
}

/// Coefficients of the independence copula: `0.5^q` on the level-0 corner
/// columns, zero elsewhere.
pub fn independence_coefficients(spec: SparseBasisSpec) -> Result<Vec<f64>> {
    let basis = sparse_basis(spec)?;
    let q = spec.arity;
    let value = 0.5f64.powi(q as i32);
    Ok((0..basis.dim())
        .map(|c| {
            if basis.multi_index(c).iter().all(|&k| k <= 1) {
                value
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independence_satisfies_constraints() {
        for (d, dd, q) in [(2, 4, 2), (2, 2, 2), (2, 6, 3), (2, 4, 3), (3, 6, 2), (3, 6, 3)] {
            let spec = SparseBasisSpec::new(d, dd, q).unwrap();
            let c = build_constraints(spec).unwrap();
            let b = DVector::from_vec(independence_coefficients(spec).unwrap());
            let eq = &c.a_eq * &b - &c.b_eq;
            assert!(eq.amax() < 1e-13, "spec {spec:?}: {}", eq.amax());
            let dens = &c.a_ineq * &b;
            assert!(dens.iter().all(|v| (v - 1.0).abs() < 1e-13));
        }
    }

    #[test]
    fn inequality_rows_cover_full_grid() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        assert_eq!(build_constraints(spec).unwrap().a_ineq.nrows(), 25);
        let spec3 = SparseBasisSpec::new(2, 6, 3).unwrap();
        assert_eq!(build_constraints(spec3).unwrap().a_ineq.nrows(), 125);
    }

    #[test]
    fn reduced_equalities_match_numeric_rank() {
        for (d, dd, q) in [(2, 4, 2), (2, 3, 2), (2, 6, 3), (2, 4, 3)] {
            let spec = SparseBasisSpec::new(d, dd, q).unwrap();
            let c = build_constraints(spec).unwrap();
            // Rebuild every row and compare against an SVD rank.
            let basis = sparse_basis(spec).unwrap();
            let knots = knot_grid(d).knots;
            let k = knots.len();
            let mut stacked = Vec::new();
            for axis in 0..2 {
                let others: Vec<usize> = (0..q).filter(|&a| a != axis).collect();
                let mut idx = vec![0usize; others.len()];
                loop {
                    let row: Vec<f64> = (0..basis.dim())
                        .map(|col| {
                            let mi = basis.multi_index(col);
                            others
                                .iter()
                                .zip(&idx)
                                .map(|(&ax, &t)| basis.univariate(mi[ax] as usize, knots[t]))
                                .product()
                        })
                        .collect();
                    stacked.extend(row);
                    let mut pos = others.len();
                    loop {
                        if pos == 0 {
                            break;
                        }
                        pos -= 1;
                        idx[pos] += 1;
                        if idx[pos] < k {
                            break;
                        }
                        idx[pos] = 0;
                        if pos == 0 {
                            pos = usize::MAX;
                            break;
                        }
                    }
                    if pos == usize::MAX {
                        break;
                    }
                }
            }
            let rows = stacked.len() / basis.dim();
            assert_eq!(rows, c.eq_rows_total);
            let full = DMatrix::from_row_slice(rows, basis.dim(), &stacked);
            let rank = full.svd(false, false).rank(1e-9);
            assert_eq!(c.a_eq.nrows(), rank, "spec {spec:?}");
            if (d, dd, q) == (2, 4, 2) {
                // two margins on five knots share the total-mass condition
                assert_eq!(rank, 9);
            }
        }
    }
}
