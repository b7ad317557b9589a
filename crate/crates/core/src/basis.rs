//! Linear B-spline density bases on dyadic knot grids, their hierarchical
//! re-parameterization and the sparse tensor-product bases built from them.
//!
//! All univariate functions here are hat functions normalized to integrate to
//! one over `[0, 1]`. Boundary hats are half-supported, so their integral is
//! `h / 2` and their value at the boundary knot is `2 / h`.
//!
//! Column conventions:
//! * the hierarchical basis of degree `d` concatenates the level-0 columns
//!   (knots 0 and 1) followed by the new odd knots of levels `1..=d`;
//! * tensor columns are indexed row-major in `(k_1, ..., k_q)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equidistant knots `k 2^-level`, `k = 0..=2^level`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotTuple {
    pub level: u32,
    pub knots: Vec<f64>,
}

impl KnotTuple {
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        level_spacing(self.level)
    }
}

pub fn knot_grid(level: u32) -> KnotTuple {
    let count = 1usize << level;
    let h = level_spacing(level);
    let knots = (0..=count).map(|k| k as f64 * h).collect();
    KnotTuple { level, knots }
}

#[inline]
pub(crate) fn level_spacing(level: u32) -> f64 {
    (-(level as f64)).exp2()
}

/// Number of univariate basis functions at degree `d`.
#[inline]
pub fn basis_size(d: u32) -> usize {
    (1usize << d) + 1
}

/// Degree, maximum cumulated hierarchy level and arity of a sparse basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparseBasisSpec {
    pub d: u32,
    #[serde(rename = "D")]
    pub max_level: u32,
    #[serde(rename = "q")]
    pub arity: usize,
}

impl SparseBasisSpec {
    pub fn new(d: u32, max_level: u32, arity: usize) -> Result<Self> {
        let spec = SparseBasisSpec {
            d,
            max_level,
            arity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The full hierarchical tensor basis, `D = q d`.
    pub fn full(d: u32, arity: usize) -> Result<Self> {
        Self::new(d, d * arity as u32, arity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::invalid("basis degree d must be at least 1"));
        }
        if self.d > 6 {
            return Err(Error::invalid(format!("basis degree d={} is too large", self.d)));
        }
        if !(2..=3).contains(&self.arity) {
            return Err(Error::invalid(format!(
                "arity q must be 2 or 3, got {}",
                self.arity
            )));
        }
        let full = self.d * self.arity as u32;
        if self.max_level < self.d || self.max_level > full {
            return Err(Error::invalid(format!(
                "maximum cumulated level D={} must lie in [{}, {}]",
                self.max_level, self.d, full
            )));
        }
        Ok(())
    }

    pub fn knots_per_axis(&self) -> usize {
        basis_size(self.d)
    }

    pub fn is_full(&self) -> bool {
        self.max_level == self.d * self.arity as u32
    }
}

/// Hierarchy level of each hierarchical basis column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyVector {
    pub levels: Vec<u32>,
}

/// Invertible `K x K` matrix with `B(u) * A = B~(u)`.
#[derive(Debug, Clone)]
pub struct HierarchicalTransform {
    pub matrix: DMatrix<f64>,
}

/// Basis evaluated at `n` points.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    /// Positions of the retained columns within the full (hierarchical)
    /// tensor; the identity for full bases.
    pub column_index: Vec<usize>,
    pub spec: Option<SparseBasisSpec>,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

fn check_unit(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::OutOfUnitInterval { value: u })
    }
}

/// Unnormalized hat at knot `knot` of the level-`level` grid.
#[inline]
fn raw_hat(level: u32, knot: usize, u: f64) -> f64 {
    let scale = (1u64 << level) as f64;
    let dist = (u * scale - knot as f64).abs();
    if dist < 1.0 {
        1.0 - dist
    } else {
        0.0
    }
}

/// Integral over `[0, 1]` of the unnormalized hat at `knot`.
#[inline]
pub(crate) fn hat_integral(level: u32, knot: usize) -> f64 {
    let h = level_spacing(level);
    if knot == 0 || knot == (1usize << level) {
        0.5 * h
    } else {
        h
    }
}

#[inline]
pub(crate) fn density_hat(level: u32, knot: usize, u: f64) -> f64 {
    raw_hat(level, knot, u) / hat_integral(level, knot)
}

/// Regular linear B-spline density basis on `knot_grid(d)`, `n x (2^d + 1)`.
pub fn density_basis(u: &[f64], d: u32) -> Result<BasisMatrix> {
    let k = basis_size(d);
    let mut values = DMatrix::zeros(u.len(), k);
    for (i, &x) in u.iter().enumerate() {
        check_unit(x)?;
        for j in 0..k {
            values[(i, j)] = density_hat(d, j, x);
        }
    }
    Ok(BasisMatrix {
        values,
        column_index: (0..k).collect(),
        spec: None,
    })
}

/// A univariate hierarchical column: the density hat at `knot` on the grid
/// of `level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct HierColumn {
    pub level: u32,
    pub knot: usize,
}

pub(crate) fn hierarchical_columns(d: u32) -> Vec<HierColumn> {
    let mut cols = vec![HierColumn { level: 0, knot: 0 }, HierColumn { level: 0, knot: 1 }];
    for level in 1..=d {
        for j in 1..=(1usize << (level - 1)) {
            cols.push(HierColumn {
                level,
                knot: 2 * j - 1,
            });
        }
    }
    cols
}

/// `A~` and the hierarchy vector `e~` for the degree-`d` hierarchical basis.
pub fn hierarchical_transform(d: u32) -> Result<(HierarchicalTransform, HierarchyVector)> {
    if d < 1 {
        return Err(Error::invalid("hierarchical transform needs d >= 1"));
    }
    let cols = hierarchical_columns(d);
    let k = basis_size(d);
    let grid = knot_grid(d);
    let mut a = DMatrix::zeros(k, k);
    for (c, col) in cols.iter().enumerate() {
        let w_col = hat_integral(col.level, col.knot);
        for (r, &t) in grid.knots.iter().enumerate() {
            a[(r, c)] = raw_hat(col.level, col.knot, t) * hat_integral(d, r) / w_col;
        }
    }
    let levels = cols.iter().map(|c| c.level).collect();
    Ok((HierarchicalTransform { matrix: a }, HierarchyVector { levels }))
}

/// The `⊕` operator: `(a ⊕ b)_l = a_{⌈l/q'⌉} + b_{l - q'(⌈l/q'⌉ - 1)}` with
/// `q' = |b|`, i.e. the row-major sum table.
pub fn oplus(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        for &y in b {
            out.push(x + y);
        }
    }
    out
}

/// Cumulated hierarchy level of every column of the `q`-fold hierarchical
/// tensor basis.
pub fn cumulated_hierarchy(e: &HierarchyVector, arity: usize) -> Result<Vec<u32>> {
    if !(2..=3).contains(&arity) {
        return Err(Error::invalid(format!("arity must be 2 or 3, got {arity}")));
    }
    let mut acc = e.levels.clone();
    for _ in 1..arity {
        acc = oplus(&acc, &e.levels);
    }
    Ok(acc)
}

const EXCLUDED: u32 = u32::MAX;

/// Precomputed layout of a sparse tensor basis.
#[derive(Debug)]
pub struct SparseBasis {
    pub spec: SparseBasisSpec,
    k: usize,
    levels: Vec<u32>,
    cols: Vec<HierColumn>,
    level_offsets: Vec<usize>,
    /// Multi-index `(k_1, .., k_q)` of each retained column.
    multi: Vec<[u16; 3]>,
    /// Full tensor position of each retained column (`O_D`).
    positions: Vec<usize>,
    full_to_sparse: Vec<u32>,
    transform: HierarchicalTransform,
}

/// Small stack-free list of nonzero univariate values.
pub(crate) type Nonzeros = Vec<(usize, f64)>;

impl SparseBasis {
    pub fn new(spec: SparseBasisSpec) -> Result<Self> {
        spec.validate()?;
        let (transform, e) = hierarchical_transform(spec.d)?;
        let k = basis_size(spec.d);
        let eps = cumulated_hierarchy(&e, spec.arity)?;
        let mut positions = Vec::new();
        let mut multi = Vec::new();
        let mut full_to_sparse = vec![EXCLUDED; eps.len()];
        for (pos, &lvl) in eps.iter().enumerate() {
            if lvl <= spec.max_level {
                full_to_sparse[pos] = positions.len() as u32;
                positions.push(pos);
                multi.push(unravel(pos, k, spec.arity));
            }
        }
        let mut level_offsets = vec![0usize; spec.d as usize + 1];
        for l in 1..=spec.d as usize {
            level_offsets[l] = (1usize << (l - 1)) + 1;
        }
        Ok(SparseBasis {
            spec,
            k,
            levels: e.levels,
            cols: hierarchical_columns(spec.d),
            level_offsets,
            multi,
            positions,
            full_to_sparse,
            transform,
        })
    }

    pub fn dim(&self) -> usize {
        self.positions.len()
    }

    pub fn arity(&self) -> usize {
        self.spec.arity
    }

    pub fn knots_per_axis(&self) -> usize {
        self.k
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn transform(&self) -> &HierarchicalTransform {
        &self.transform
    }

    pub(crate) fn multi_index(&self, col: usize) -> &[u16] {
        &self.multi[col][..self.spec.arity]
    }

    /// Sparse column for a full tensor position, if retained.
    pub fn sparse_column(&self, full_position: usize) -> Option<usize> {
        match self.full_to_sparse.get(full_position) {
            Some(&c) if c != EXCLUDED => Some(c as usize),
            _ => None,
        }
    }

    /// Value of hierarchical univariate column `c` at `u`.
    pub fn univariate(&self, c: usize, u: f64) -> f64 {
        let col = self.cols[c];
        density_hat(col.level, col.knot, u)
    }

    /// Nonzero hierarchical univariate values at `u` (at most `d + 2`).
    pub(crate) fn univariate_nonzeros(&self, u: f64, out: &mut Nonzeros) {
        out.clear();
        let v0 = 2.0 * (1.0 - u);
        let v1 = 2.0 * u;
        if v0 > 0.0 {
            out.push((0, v0));
        }
        if v1 > 0.0 {
            out.push((1, v1));
        }
        for level in 1..=self.spec.d {
            let scale = (1u64 << level) as f64;
            let x = u * scale;
            let f = x.floor() as i64;
            let j = if f.rem_euclid(2) == 1 { f } else { f + 1 };
            if j >= 1 && j < (1i64 << level) {
                let dist = (x - j as f64).abs();
                if dist < 1.0 {
                    let col = self.level_offsets[level as usize] + ((j - 1) / 2) as usize;
                    out.push((col, (1.0 - dist) * scale));
                }
            }
        }
    }

    /// Nonzero entries of the sparse tensor row at `point` (length `q`).
    pub(crate) fn row_nonzeros(&self, point: &[f64], out: &mut Nonzeros) {
        out.clear();
        let q = self.spec.arity;
        let mut per_axis: [Nonzeros; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (axis, &u) in point.iter().enumerate().take(q) {
            self.univariate_nonzeros(u, &mut per_axis[axis]);
        }
        let k = self.k;
        if q == 2 {
            for &(c1, v1) in &per_axis[0] {
                for &(c2, v2) in &per_axis[1] {
                    if let Some(s) = self.sparse_column(c1 * k + c2) {
                        out.push((s, v1 * v2));
                    }
                }
            }
        } else {
            for &(c1, v1) in &per_axis[0] {
                for &(c2, v2) in &per_axis[1] {
                    let base = (c1 * k + c2) * k;
                    let v12 = v1 * v2;
                    for &(c3, v3) in &per_axis[2] {
                        if let Some(s) = self.sparse_column(base + c3) {
                            out.push((s, v12 * v3));
                        }
                    }
                }
            }
        }
    }

    /// Dense sparse-basis row at `point`.
    pub fn row(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.spec.arity {
            return Err(Error::DimensionMismatch {
                expected: self.spec.arity,
                found: point.len(),
            });
        }
        for &u in point {
            check_unit(u)?;
        }
        let mut nz = Vec::new();
        self.row_nonzeros(point, &mut nz);
        let mut row = vec![0.0; self.dim()];
        for (c, v) in nz {
            row[c] += v;
        }
        Ok(row)
    }
}

fn unravel(mut pos: usize, k: usize, arity: usize) -> [u16; 3] {
    let mut idx = [0u16; 3];
    for axis in (0..arity).rev() {
        idx[axis] = (pos % k) as u16;
        pos /= k;
    }
    idx
}

/// Shared, immutable basis layout for a spec.
pub fn sparse_basis(spec: SparseBasisSpec) -> Result<Arc<SparseBasis>> {
    static CACHE: OnceLock<Mutex<HashMap<SparseBasisSpec, Arc<SparseBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(b) = cache.lock().expect("basis cache poisoned").get(&spec) {
        return Ok(Arc::clone(b));
    }
    let built = Arc::new(SparseBasis::new(spec)?);
    let mut guard = cache.lock().expect("basis cache poisoned");
    Ok(Arc::clone(guard.entry(spec).or_insert(built)))
}

/// Sparse tensor basis evaluated at `n` points given per axis.
pub fn sparse_tensor_basis(axes: &[&[f64]], spec: SparseBasisSpec) -> Result<BasisMatrix> {
    spec.validate()?;
    if axes.len() != spec.arity {
        return Err(Error::DimensionMismatch {
            expected: spec.arity,
            found: axes.len(),
        });
    }
    let n = axes[0].len();
    for a in axes {
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.len(),
            });
        }
    }
    let basis = sparse_basis(spec)?;
    let mut values = DMatrix::zeros(n, basis.dim());
    let mut point = vec![0.0; spec.arity];
    for i in 0..n {
        for (axis, a) in axes.iter().enumerate() {
            point[axis] = a[i];
        }
        let row = basis.row(&point)?;
        for (c, v) in row.into_iter().enumerate() {
            values[(i, c)] = v;
        }
    }
    Ok(BasisMatrix {
        values,
        column_index: basis.positions().to_vec(),
        spec: Some(spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn knot_grids() {
        assert_eq!(knot_grid(2).knots, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(knot_grid(0).knots, vec![0.0, 1.0]);
        let g3 = knot_grid(3);
        assert_eq!(g3.len(), 9);
        for (k, t) in g3.knots.iter().enumerate() {
            assert_eq!(*t, k as f64 / 8.0);
        }
    }

    #[test]
    fn density_basis_rows() {
        let b = density_basis(&[0.5, 0.0], 1).unwrap();
        assert_eq!(b.values.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 0.0]);
        assert_eq!(b.values.row(1).iter().copied().collect::<Vec<_>>(), vec![4.0, 0.0, 0.0]);
        assert!(density_basis(&[1.2], 1).is_err());
        assert!(density_basis(&[-0.1], 1).is_err());
    }

    #[test]
    fn density_basis_partition_of_unity() {
        for d in 1..5 {
            let u: Vec<f64> = (0..=37).map(|i| i as f64 / 37.0).collect();
            let b = density_basis(&u, d).unwrap();
            for i in 0..u.len() {
                let s: f64 = (0..b.ncols()).map(|k| b.values[(i, k)] * hat_integral(d, k)).sum();
                assert!(close(s, 1.0, 1e-14));
            }
        }
    }

    #[test]
    fn right_boundary_is_covered() {
        let b = density_basis(&[1.0], 2).unwrap();
        assert_eq!(b.values[(0, 4)], 8.0);
    }

    #[test]
    fn hierarchy_vector_and_index_sets() {
        let (_, e) = hierarchical_transform(2).unwrap();
        assert_eq!(e.levels, vec![0, 0, 1, 2, 2]);
        let cols = hierarchical_columns(2);
        // I_2 = {2, 4} in one-based positions of the level-2 basis.
        let i2: Vec<usize> = cols.iter().filter(|c| c.level == 2).map(|c| c.knot + 1).collect();
        assert_eq!(i2, vec![2, 4]);
        let (_, e3) = hierarchical_transform(3).unwrap();
        assert_eq!(e3.levels, vec![0, 0, 1, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn transform_reproduces_hierarchical_columns() {
        for d in 1..5 {
            let (a, _) = hierarchical_transform(d).unwrap();
            let rank = a.matrix.clone().svd(false, false).rank(1e-10);
            assert_eq!(rank, basis_size(d));
            let spec = SparseBasisSpec::full(d, 2).unwrap();
            let basis = SparseBasis::new(spec).unwrap();
            for i in 0..200 {
                let u = (i as f64 * 0.618_033_988_75).fract();
                let b = density_basis(&[u], d).unwrap();
                let prod = &b.values * &a.matrix;
                for c in 0..basis_size(d) {
                    assert!(close(prod[(0, c)], basis.univariate(c, u), 1e-12));
                }
            }
        }
    }

    #[test]
    fn univariate_nonzeros_match_dense() {
        let spec = SparseBasisSpec::full(3, 2).unwrap();
        let basis = SparseBasis::new(spec).unwrap();
        let mut nz = Vec::new();
        for i in 0..=400 {
            let u = i as f64 / 400.0;
            basis.univariate_nonzeros(u, &mut nz);
            let mut dense = vec![0.0; 9];
            for &(c, v) in &nz {
                dense[c] = v;
            }
            for (c, val) in dense.iter().enumerate() {
                assert!(close(*val, basis.univariate(c, u), 1e-12), "u={u} c={c}");
            }
        }
    }

    #[test]
    fn bivariate_level_two_count() {
        let (_, e) = hierarchical_transform(2).unwrap();
        let eps = cumulated_hierarchy(&e, 2).unwrap();
        assert_eq!(eps.iter().filter(|&&l| l <= 2).count(), 17);
    }

    #[test]
    fn sparse_dimensions() {
        let cases = [
            (2, 4, 2, 25),
            (2, 6, 3, 125),
            (2, 4, 3, 105),
            (3, 6, 2, 81),
            (3, 6, 3, 473),
            (3, 9, 3, 729),
        ];
        for (d, dd, q, m) in cases {
            let b = SparseBasis::new(SparseBasisSpec::new(d, dd, q).unwrap()).unwrap();
            assert_eq!(b.dim(), m, "d={d} D={dd} q={q}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SparseBasisSpec::new(0, 0, 2).is_err());
        assert!(SparseBasisSpec::new(2, 1, 2).is_err());
        assert!(SparseBasisSpec::new(2, 5, 2).is_err());
        assert!(SparseBasisSpec::new(2, 4, 4).is_err());
        assert!(SparseBasisSpec::new(2, 6, 3).is_ok());
    }

    #[test]
    fn tensor_rejects_mismatched_axes() {
        let spec = SparseBasisSpec::new(2, 4, 2).unwrap();
        assert!(sparse_tensor_basis(&[&[0.1, 0.2], &[0.3]], spec).is_err());
        assert!(sparse_tensor_basis(&[&[0.1]], spec).is_err());
    }
}
