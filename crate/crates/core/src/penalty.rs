//! Difference penalties for density B-spline coefficients, carried over to
//! the hierarchical parameterization and restricted to sparse columns.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::basis::{basis_size, hat_integral, sparse_basis, SparseBasisSpec};
use crate::error::{Error, Result};

/// Default difference order.
pub const DEFAULT_ORDER: usize = 1;

/// `(K - r) x K` matrix of `r`-th order differences.
pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>> {
    if order < 1 || order >= k {
        return Err(Error::invalid(format!(
            "difference order {order} must lie in [1, {k})"
        )));
    }
    let mut l = DMatrix::<f64>::identity(k, k);
    for step in 0..order {
        let rows = k - step;
        let mut first = DMatrix::<f64>::zeros(rows - 1, rows);
        for i in 0..rows - 1 {
            first[(i, i)] = 1.0;
            first[(i, i + 1)] = -1.0;
        }
        l = first * l;
    }
    Ok(l)
}

/// Integrals of the regular linear B-splines on `knot_grid(d)`.
pub fn density_weights(d: u32) -> DVector<f64> {
    DVector::from_iterator(basis_size(d), (0..basis_size(d)).map(|k| hat_integral(d, k)))
}

/// `W L^T L W` for a single axis.
pub fn univariate_penalty(d: u32, order: usize) -> Result<DMatrix<f64>> {
    let k = basis_size(d);
    let l = difference_matrix(k, order)?;
    let w = DMatrix::from_diagonal(&density_weights(d));
    Ok(&w * l.transpose() * &l * &w)
}

#[derive(Debug)]
struct PenaltyBase {
    matrix: DMatrix<f64>,
    range: OnceLock<RangeEigen>,
}

/// Eigenvectors and eigenvalues spanning the range of an unscaled penalty.
#[derive(Debug, Clone)]
pub struct RangeEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl PenaltyBase {
    fn new(matrix: DMatrix<f64>) -> Self {
        PenaltyBase {
            matrix,
            range: OnceLock::new(),
        }
    }
}

/// Penalty on sparse hierarchical coefficients, `lambda * base`.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    base: Arc<PenaltyBase>,
    pub lambda: f64,
    /// `None` for penalties built from an explicit matrix.
    pub spec: Option<SparseBasisSpec>,
    pub order: usize,
}

impl PenaltyMatrix {
    /// Wraps an explicit symmetric positive semidefinite matrix.
    pub fn from_matrix(base: DMatrix<f64>, lambda: f64) -> Result<PenaltyMatrix> {
        if !base.is_square() {
            return Err(Error::invalid("penalty matrix must be square"));
        }
        check_lambda(lambda)?;
        Ok(PenaltyMatrix {
            base: Arc::new(PenaltyBase::new(base)),
            lambda,
            spec: None,
            order: 0,
        })
    }

    /// The unscaled matrix (`lambda = 1`).
    pub fn unscaled(&self) -> &DMatrix<f64> {
        &self.base.matrix
    }

    /// Positive-eigenvalue eigensystem of the unscaled matrix.
    pub fn range_eigen(&self) -> &RangeEigen {
        self.base.range.get_or_init(|| {
            let eig = self.base.matrix.clone().symmetric_eigen();
            let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let keep: Vec<usize> = (0..eig.eigenvalues.len())
                .filter(|&i| eig.eigenvalues[i] > top * 1e-10)
                .collect();
            let m = self.base.matrix.nrows();
            let mut vectors = DMatrix::zeros(m, keep.len());
            for (j, &i) in keep.iter().enumerate() {
                vectors.set_column(j, &eig.eigenvectors.column(i));
            }
            let values = DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i]));
            RangeEigen { vectors, values }
        })
    }

    /// `lambda * base`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.base.matrix * self.lambda
    }

    pub fn dim(&self) -> usize {
        self.base.matrix.nrows()
    }

    pub fn with_lambda(&self, lambda: f64) -> PenaltyMatrix {
        PenaltyMatrix {
            base: Arc::clone(&self.base),
            lambda,
            spec: self.spec,
            order: self.order,
        }
    }

    /// `b^T base b`, the unscaled quadratic form.
    pub fn quadratic_form(&self, b: &[f64]) -> f64 {
        let v = DVector::from_column_slice(b);
        (v.transpose() * &self.base.matrix * &v)[(0, 0)]
    }

    /// Dimension of the numerical null space of the unscaled penalty.
    pub fn null_dimension(&self) -> usize {
        self.dim() - self.range_eigen().values.len()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn build_base(spec: SparseBasisSpec, order: usize) -> Result<DMatrix<f64>> {
    let basis = sparse_basis(spec)?;
    let a = &basis.transform().matrix;
    let p = univariate_penalty(spec.d, order)?;
    let w = DMatrix::from_diagonal(&density_weights(spec.d));
    let directional = a.transpose() * p * a;
    let wa = &w * a;
    let gram = wa.transpose() * &wa;
    let m = basis.dim();
    let q = spec.arity;
    let mut out = DMatrix::zeros(m, m);
    for r in 0..m {
        let ir = basis.multi_index(r);
        for c in r..m {
            let ic = basis.multi_index(c);
            let mut total = 0.0;
            for j in 0..q {
                let mut term = directional[(ir[j] as usize, ic[j] as usize)];
                for i in 0..q {
                    if i != j {
                        term *= gram[(ir[i] as usize, ic[i] as usize)];
                    }
                }
                total += term;
            }
            out[(r, c)] = total;
            out[(c, r)] = total;
        }
    }
    Ok(out)
}

fn cached_base(spec: SparseBasisSpec, order: usize) -> Result<Arc<PenaltyBase>> {
    type Cache = Mutex<HashMap<(SparseBasisSpec, usize), Arc<PenaltyBase>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("penalty cache poisoned").get(&(spec, order)) {
        return Ok(Arc::clone(p));
    }
    let built = Arc::new(PenaltyBase::new(build_base(spec, order)?));
    let mut guard = cache.lock().expect("penalty cache poisoned");
    Ok(Arc::clone(guard.entry((spec, order)).or_insert(built)))
}

/// Sum of directional penalties on the sparse hierarchical coefficients,
/// scaled by `lambda`.
pub fn assemble_penalty(spec: SparseBasisSpec, order: usize, lambda: f64) -> Result<PenaltyMatrix> {
    spec.validate()?;
    check_lambda(lambda)?;
    if order >= basis_size(spec.d) {
        return Err(Error::invalid(format!("difference order {order} too large")));
    }
    Ok(PenaltyMatrix {
        base: cached_base(spec, order)?,
        lambda,
        spec: Some(spec),
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_differences() {
        let l = difference_matrix(5, 1).unwrap();
        assert_eq!(l.nrows(), 4);
        assert_eq!(l.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(l.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, -1.0, 0.0, 0.0]);
        let ones = DVector::from_element(5, 1.0);
        assert!((l * ones).amax() == 0.0);
    }

    #[test]
    fn second_differences_compose() {
        let l2 = difference_matrix(6, 2).unwrap();
        let composed = difference_matrix(5, 1).unwrap() * difference_matrix(6, 1).unwrap();
        assert_eq!(l2, composed);
        assert!(difference_matrix(4, 4).is_err());
        assert!(difference_matrix(4, 0).is_err());
    }

    #[test]
    fn weights() {
        assert_eq!(density_weights(1).as_slice(), &[0.25, 0.5, 0.25]);
        assert_eq!(density_weights(2).as_slice(), &[0.125, 0.25, 0.25, 0.25, 0.125]);
        for d in 1..6 {
            assert!((density_weights(d).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn univariate_rank() {
        for d in 1..5 {
            for r in 1..3 {
                let p = univariate_penalty(d, r).unwrap();
                let rank = p.svd(false, false).rank(1e-12);
                assert_eq!(rank, basis_size(d) - r);
            }
        }
    }

    #[test]
    fn assembled_is_symmetric_psd_and_linear() {
        for (d, dd, q) in [(2, 4, 2), (2, 3, 2), (2, 6, 3), (2, 4, 3), (3, 6, 2)] {
            let spec = SparseBasisSpec::new(d, dd, q).unwrap();
            let p1 = assemble_penalty(spec, 1, 1.5).unwrap();
            let m = p1.matrix();
            assert!((&m - m.transpose()).amax() < 1e-14);
            let eig = m.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-10);
            let p2 = assemble_penalty(spec, 1, 3.0).unwrap();
            assert!((p2.matrix() - m * 2.0).amax() < 1e-12);
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        assert!(assemble_penalty(spec, 1, -1.0).is_err());
        assert!(assemble_penalty(spec, 1, f64::NAN).is_err());
    }
}
