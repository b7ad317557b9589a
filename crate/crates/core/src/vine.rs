//! Regular vines: structure selection by cAIC minimum spanning trees,
//! sequential estimation with partial or conditional pair copulas, and
//! density evaluation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SparseBasisSpec;
use crate::condreduce::{reduce_conditioners, ConditioningReduction};
use crate::copula::{Along, EvalPoint, Evaluator};
use crate::error::{Error, Result};
use crate::optimize::{fit_copula_density, CopulaFit, FitConfig};
use crate::satest::{test_simplifying_groups, SaTestResult, DEFAULT_GROUPS};

/// Floor applied to pair densities before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FitMode {
    /// Partial (unconditional) copulas on every edge.
    SimpA,
    /// Conditional copulas on every edge beyond the first tree.
    Cond,
    /// Conditional copulas where the simplifying assumption is rejected.
    Test,
}

impl FitMode {
    pub const ALL: [FitMode; 3] = [FitMode::SimpA, FitMode::Cond, FitMode::Test];
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::SimpA => "SimpA",
            FitMode::Cond => "Cond",
            FitMode::Test => "Test",
        })
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simpa" => Ok(FitMode::SimpA),
            "cond" => Ok(FitMode::Cond),
            "test" => Ok(FitMode::Test),
            _ => Err(Error::invalid(format!("unknown estimator {s:?}"))),
        }
    }
}

/// Conditioned pair `(a, b)`, `a < b`, with conditioning set `cond`
/// (sorted). Variables are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub cond: Vec<usize>,
}

impl Edge {
    pub fn new(x: usize, y: usize, mut cond: Vec<usize>) -> Self {
        cond.sort_unstable();
        Edge {
            a: x.min(y),
            b: x.max(y),
            cond,
        }
    }

    /// All variables touched by the edge, sorted.
    pub fn variables(&self) -> Vec<usize> {
        let mut v = self.cond.clone();
        v.push(self.a);
        v.push(self.b);
        v.sort_unstable();
        v
    }

    /// The edge joining two edges of the previous tree, if they satisfy the
    /// proximity condition.
    pub fn join(e1: &Edge, e2: &Edge) -> Option<Edge> {
        let v1 = e1.variables();
        let v2 = e2.variables();
        let common: Vec<usize> = v1.iter().copied().filter(|x| v2.contains(x)).collect();
        if common.len() + 1 != v1.len() || v1.len() != v2.len() {
            return None;
        }
        let x = *v1.iter().find(|x| !common.contains(x))?;
        let y = *v2.iter().find(|y| !common.contains(y))?;
        Some(Edge::new(x, y, common))
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.a + 1, self.b + 1)?;
        if !self.cond.is_empty() {
            let c: Vec<String> = self.cond.iter().map(|x| (x + 1).to_string()).collect();
            write!(f, "|{}", c.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineStructure {
    pub dim: usize,
    pub trees: Vec<Vec<Edge>>,
}

fn is_spanning_tree(nodes: usize, links: &[(usize, usize)]) -> bool {
    if links.len() + 1 != nodes {
        return false;
    }
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(x, y) in links {
        let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
        if rx == ry {
            return false;
        }
        parent[rx] = ry;
    }
    true
}

impl VineStructure {
    /// Checks tree sizes, spanning-tree property and proximity.
    pub fn validate(&self) -> Result<()> {
        let p = self.dim;
        if p < 2 || self.trees.len() != p - 1 {
            return Err(Error::invalid(format!(
                "a {p}-dimensional vine needs {} trees",
                p.saturating_sub(1)
            )));
        }
        for (j, tree) in self.trees.iter().enumerate() {
            if tree.len() != p - 1 - j {
                return Err(Error::invalid(format!("tree {} has {} edges", j + 1, tree.len())));
            }
            if tree.iter().any(|e| e.cond.len() != j || e.a >= p || e.b >= p || e.a == e.b) {
                return Err(Error::invalid(format!("malformed edge in tree {}", j + 1)));
            }
            let links: Vec<(usize, usize)> = if j == 0 {
                tree.iter().map(|e| (e.a, e.b)).collect()
            } else {
                let prev = &self.trees[j - 1];
                let mut links = Vec::new();
                for e in tree {
                    let mut found = None;
                    'outer: for x in 0..prev.len() {
                        for y in x + 1..prev.len() {
                            if Edge::join(&prev[x], &prev[y]).as_ref() == Some(e) {
                                found = Some((x, y));
                                break 'outer;
                            }
                        }
                    }
                    match found {
                        Some(l) => links.push(l),
                        None => {
                            return Err(Error::invalid(format!(
                                "edge {e} in tree {} violates the proximity condition",
                                j + 1
                            )))
                        }
                    }
                }
                links
            };
            let nodes = if j == 0 { p } else { self.trees[j - 1].len() };
            if !is_spanning_tree(nodes, &links) {
                return Err(Error::invalid(format!("tree {} is not a spanning tree", j + 1)));
            }
        }
        Ok(())
    }

    /// D-vine on variables in natural order.
    pub fn d_vine(dim: usize) -> Self {
        let trees = (1..dim)
            .map(|j| (0..dim - j).map(|i| Edge::new(i, i + j, (i + 1..i + j).collect())).collect())
            .collect();
        VineStructure { dim, trees }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineConfig {
    /// Basis for unconditional pair copulas.
    pub spec2: SparseBasisSpec,
    /// Basis for conditional pair copulas.
    pub spec3: SparseBasisSpec,
    pub fit: FitConfig,
    pub alpha: f64,
    pub sa_groups: usize,
    /// Fit independent edges of a tree on the rayon pool.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_parallel() -> bool {
    true
}

impl VineConfig {
    pub fn new(d: u32, d2: u32, d3: u32) -> Result<Self> {
        Ok(VineConfig {
            spec2: SparseBasisSpec::new(d, d2, 2)?,
            spec3: SparseBasisSpec::new(d, d3, 3)?,
            fit: FitConfig::default(),
            alpha: 0.05,
            sa_groups: DEFAULT_GROUPS,
            parallel: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec2.validate()?;
        self.spec3.validate()?;
        if self.spec2.arity != 2 || self.spec3.arity != 3 {
            return Err(Error::invalid("spec2 must be bivariate and spec3 trivariate"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        self.fit.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Partial,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEdge {
    pub edge: Edge,
    pub kind: EdgeKind,
    /// The copula used by the vine on this edge.
    pub fit: CopulaFit,
    /// Partial fit kept alongside a conditional one in Test mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<CopulaFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sa_test: Option<SaTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<ConditioningReduction>,
    /// In Test mode after a rejection: whether the conditional fit has the
    /// lower cAIC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caic_prefers_conditional: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedVine {
    pub mode: FitMode,
    pub structure: VineStructure,
    pub edges: Vec<Vec<FittedEdge>>,
    pub config: VineConfig,
    pub n_obs: usize,
}

type Key = (usize, Vec<usize>);

fn edge_error(e: &Edge, err: Error) -> Error {
    Error::EdgeFit {
        edge: e.to_string(),
        source: Box::new(err),
    }
}

fn check_data(u: &DMatrix<f64>) -> Result<()> {
    if u.ncols() < 2 {
        return Err(Error::invalid("need at least two variables"));
    }
    if u.nrows() < 2 {
        return Err(Error::InsufficientData(format!("{} observations", u.nrows())));
    }
    if let Some(&x) = u.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::OutOfUnitInterval { value: x });
    }
    Ok(())
}

fn initial_store(u: &DMatrix<f64>) -> HashMap<Key, Vec<f64>> {
    (0..u.ncols())
        .map(|j| ((j, Vec::new()), u.column(j).iter().copied().collect()))
        .collect()
}

fn pair_data<'s>(store: &'s HashMap<Key, Vec<f64>>, e: &Edge) -> Result<(&'s [f64], &'s [f64])> {
    let get = |x: usize| {
        store
            .get(&(x, e.cond.clone()))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("missing pseudo-observations for edge {e}")))
    };
    Ok((get(e.a)?, get(e.b)?))
}

/// `F(a | cond, b)` and `F(b | cond, a)` for every observation.
fn transforms(fit: &CopulaFit, u: &[f64], v: &[f64], w: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let ev = Evaluator::new(fit)?;
    let n = u.len();
    let mut fa = Vec::with_capacity(n);
    let mut fb = Vec::with_capacity(n);
    for i in 0..n {
        let wi = w.map(|w| w[i]);
        fa.push(ev.h(Along::First, u[i], v[i], wi)?);
        fb.push(ev.h(Along::Second, v[i], u[i], wi)?);
    }
    Ok((fa, fb))
}

fn store_transforms(store: &mut HashMap<Key, Vec<f64>>, e: &Edge, fa: Vec<f64>, fb: Vec<f64>) {
    let mut ca = e.cond.clone();
    ca.push(e.b);
    ca.sort_unstable();
    let mut cb = e.cond.clone();
    cb.push(e.a);
    cb.sort_unstable();
    store.insert((e.a, ca), fa);
    store.insert((e.b, cb), fb);
}

fn map_maybe_parallel<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Prim's algorithm over `nodes` with candidate links `(x, y, weight, label)`;
/// ties are broken by the label.
fn prim(nodes: usize, links: &[(usize, usize, f64, Edge)]) -> Vec<usize> {
    let mut in_tree = vec![false; nodes];
    in_tree[0] = true;
    let mut chosen = Vec::with_capacity(nodes - 1);
    for _ in 1..nodes {
        let best = links
            .iter()
            .enumerate()
            .filter(|(_, l)| in_tree[l.0] != in_tree[l.1])
            .min_by(|(_, x), (_, y)| x.2.total_cmp(&y.2).then_with(|| x.3.cmp(&y.3)));
        match best {
            Some((k, l)) => {
                in_tree[l.0] = true;
                in_tree[l.1] = true;
                chosen.push(k);
            }
            None => break,
        }
    }
    chosen
}

fn fit_partial(u: &[f64], v: &[f64], config: &VineConfig) -> Result<CopulaFit> {
    fit_copula_density(&[u, v], config.spec2, &config.fit)
}

/// Selects a structure by sequential cAIC minimum spanning trees of
/// partial-copula fits, returning the SimpA fits along the way.
pub fn select_structure_with_fits(u: &DMatrix<f64>, config: &VineConfig) -> Result<FittedVine> {
    config.validate()?;
    check_data(u)?;
    let p = u.ncols();
    let mut store = initial_store(u);
    let mut trees: Vec<Vec<Edge>> = Vec::new();
    let mut fitted: Vec<Vec<FittedEdge>> = Vec::new();
    for j in 0..p - 1 {
        // candidate (node, node, edge) triples
        let candidates: Vec<(usize, usize, Edge)> = if j == 0 {
            (0..p)
                .flat_map(|a| (a + 1..p).map(move |b| (a, b, Edge::new(a, b, vec![]))))
                .collect()
        } else {
            let prev = &trees[j - 1];
            let mut c = Vec::new();
            for x in 0..prev.len() {
                for y in x + 1..prev.len() {
                    if let Some(e) = Edge::join(&prev[x], &prev[y]) {
                        c.push((x, y, e));
                    }
                }
            }
            c
        };
        let fits: Vec<Result<CopulaFit>> = map_maybe_parallel(&candidates, config.parallel, |(_, _, e)| {
            let (a, b) = pair_data(&store, e)?;
            fit_partial(a, b, config).map_err(|err| edge_error(e, err))
        });
        let mut links = Vec::with_capacity(candidates.len());
        let mut fits_ok = Vec::with_capacity(candidates.len());
        for ((x, y, e), f) in candidates.into_iter().zip(fits) {
            let f = f?;
            links.push((x, y, f.caic, e));
            fits_ok.push(f);
        }
        let nodes = if j == 0 { p } else { trees[j - 1].len() };
        let mut chosen = prim(nodes, &links);
        chosen.sort_by(|&x, &y| links[x].3.cmp(&links[y].3));
        let mut tree = Vec::with_capacity(chosen.len());
        let mut tree_fits = Vec::with_capacity(chosen.len());
        for k in chosen {
            let e = links[k].3.clone();
            let fit = fits_ok[k].clone();
            if j + 1 < p - 1 {
                let (a, b) = pair_data(&store, &e)?;
                let (fa, fb) = transforms(&fit, a, b, None).map_err(|err| edge_error(&e, err))?;
                store_transforms(&mut store, &e, fa, fb);
            }
            tree_fits.push(FittedEdge {
                edge: e.clone(),
                kind: EdgeKind::Partial,
                fit,
                partial: None,
                sa_test: None,
                reduction: None,
                caic_prefers_conditional: None,
            });
            tree.push(e);
        }
        trees.push(tree);
        fitted.push(tree_fits);
    }
    let structure = VineStructure { dim: p, trees };
    structure.validate()?;
    Ok(FittedVine {
        mode: FitMode::SimpA,
        structure,
        edges: fitted,
        config: config.clone(),
        n_obs: u.nrows(),
    })
}

/// Vine structure chosen by cAIC minimum spanning trees.
pub fn select_structure(u: &DMatrix<f64>, config: &VineConfig) -> Result<VineStructure> {
    Ok(select_structure_with_fits(u, config)?.structure)
}

fn conditioning_columns<'a>(u: &'a DMatrix<f64>, cond: &[usize]) -> Vec<&'a [f64]> {
    let rows = u.nrows();
    cond.iter()
        .map(|&k| &u.as_slice()[k * rows..(k + 1) * rows])
        .collect()
}

/// Fits the vine on a given structure. `simpa` may hold a SimpA fit on the
/// same data and structure whose partial fits are reused while the
/// pseudo-observations agree.
pub fn fit_vine_on(
    u: &DMatrix<f64>,
    structure: &VineStructure,
    mode: FitMode,
    config: &VineConfig,
    simpa: Option<&FittedVine>,
) -> Result<FittedVine> {
    config.validate()?;
    check_data(u)?;
    structure.validate()?;
    if structure.dim != u.ncols() {
        return Err(Error::DimensionMismatch {
            expected: structure.dim,
            found: u.ncols(),
        });
    }
    if let Some(s) = simpa {
        if s.mode != FitMode::SimpA || &s.structure != structure || s.config != *config || s.n_obs != u.nrows() {
            return Err(Error::invalid("reusable fits must be a SimpA fit of the same structure"));
        }
    }
    let p = structure.dim;
    let mut store = initial_store(u);
    let mut edges = Vec::with_capacity(p - 1);
    // true while every earlier edge is partial, so the pseudo-observations
    // coincide with the SimpA pass
    let mut matches_simpa = true;
    for (j, tree) in structure.trees.iter().enumerate() {
        let indexed: Vec<(usize, &Edge)> = tree.iter().enumerate().collect();
        let results: Vec<Result<(FittedEdge, Option<(Vec<f64>, Vec<f64>)>)>> =
            map_maybe_parallel(&indexed, config.parallel, |&(k, e)| {
                let reuse = if matches_simpa { simpa.map(|s| &s.edges[j][k].fit) } else { None };
                fit_edge(u, &store, e, j, mode, config, reuse, j + 1 < p - 1)
                    .map_err(|err| edge_error(e, err))
            });
        let mut fitted_tree = Vec::with_capacity(tree.len());
        for r in results {
            let (fe, tr) = r?;
            if fe.kind == EdgeKind::Conditional {
                matches_simpa = false;
            }
            if let Some((fa, fb)) = tr {
                store_transforms(&mut store, &fe.edge, fa, fb);
            }
            fitted_tree.push(fe);
        }
        edges.push(fitted_tree);
    }
    Ok(FittedVine {
        mode,
        structure: structure.clone(),
        edges,
        config: config.clone(),
        n_obs: u.nrows(),
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_edge(
    data: &DMatrix<f64>,
    store: &HashMap<Key, Vec<f64>>,
    e: &Edge,
    tree: usize,
    mode: FitMode,
    config: &VineConfig,
    reuse: Option<&CopulaFit>,
    need_transforms: bool,
) -> Result<(FittedEdge, Option<(Vec<f64>, Vec<f64>)>)> {
    let (u, v) = pair_data(store, e)?;
    let partial = |_: ()| -> Result<CopulaFit> {
        match reuse {
            Some(f) => Ok(f.clone()),
            None => fit_partial(u, v, config),
        }
    };
    let mut fe = FittedEdge {
        edge: e.clone(),
        kind: EdgeKind::Partial,
        fit: CopulaFit::independence(config.spec2)?,
        partial: None,
        sa_test: None,
        reduction: None,
        caic_prefers_conditional: None,
    };
    if tree == 0 || mode == FitMode::SimpA {
        fe.fit = partial(())?;
    } else {
        let red = reduce_conditioners(&conditioning_columns(data, &e.cond))?;
        let w = red.reduced.as_slice();
        let conditional = |_: ()| fit_copula_density(&[u, v, w], config.spec3, &config.fit);
        match mode {
            FitMode::Cond => {
                fe.fit = conditional(())?;
                fe.kind = EdgeKind::Conditional;
                fe.reduction = Some(red);
            }
            FitMode::Test => {
                let sa = match test_simplifying_groups(u, v, w, config.alpha, config.sa_groups) {
                    Ok(r) => Some(r),
                    Err(Error::InsufficientData(msg)) => {
                        log::warn!("edge {e}: simplifying-assumption test skipped ({msg})");
                        None
                    }
                    Err(err) => return Err(err),
                };
                let p_fit = partial(())?;
                if sa.as_ref().is_some_and(|r| r.reject) {
                    let c_fit = conditional(())?;
                    fe.caic_prefers_conditional = Some(c_fit.caic < p_fit.caic);
                    fe.fit = c_fit;
                    fe.partial = Some(p_fit);
                    fe.kind = EdgeKind::Conditional;
                    fe.reduction = Some(red);
                } else {
                    fe.fit = p_fit;
                }
                fe.sa_test = sa;
            }
            FitMode::SimpA => unreachable!(),
        }
    }
    let transforms = if need_transforms {
        let w = fe.reduction.as_ref().map(|r| r.reduced.as_slice());
        Some(transforms(&fe.fit, u, v, w)?)
    } else {
        None
    };
    Ok((fe, transforms))
}

/// Selects a structure and fits it in `mode`.
pub fn fit_vine(u: &DMatrix<f64>, mode: FitMode, config: &VineConfig) -> Result<FittedVine> {
    let simpa = select_structure_with_fits(u, config)?;
    if mode == FitMode::SimpA {
        return Ok(simpa);
    }
    fit_vine_on(u, &simpa.structure.clone(), mode, config, Some(&simpa))
}

/// Evaluators for every edge of a fitted vine.
pub struct VineEvaluator<'a> {
    vine: &'a FittedVine,
    evals: Vec<Vec<Evaluator<'a>>>,
}

impl<'a> VineEvaluator<'a> {
    pub fn new(vine: &'a FittedVine) -> Result<Self> {
        let evals = vine
            .edges
            .iter()
            .map(|t| t.iter().map(|fe| Evaluator::new(&fe.fit)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(VineEvaluator { vine, evals })
    }

    /// Per-edge log densities at `u`, tree by tree.
    pub fn edge_log_densities(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let p = self.vine.structure.dim;
        if u.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: u.len(),
            });
        }
        let mut store: HashMap<Key, f64> = (0..p).map(|j| ((j, Vec::new()), u[j])).collect();
        let mut out = Vec::with_capacity(p - 1);
        let last = self.vine.edges.len().saturating_sub(1);
        for (j, tree) in self.vine.edges.iter().enumerate() {
            let mut logs = Vec::with_capacity(tree.len());
            for (k, fe) in tree.iter().enumerate() {
                let e = &fe.edge;
                let get = |x: usize| {
                    store
                        .get(&(x, e.cond.clone()))
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("missing argument for edge {e}")))
                };
                let (x, y) = (get(e.a)?, get(e.b)?);
                let w = match &fe.reduction {
                    Some(r) if fe.kind == EdgeKind::Conditional => {
                        let c: Vec<f64> = e.cond.iter().map(|&i| u[i]).collect();
                        Some(r.project(&c)?)
                    }
                    _ => None,
                };
                let ev = &self.evals[j][k];
                let d = ev.density(&EvalPoint { u: x, v: y, w })?;
                logs.push(d.max(DENSITY_FLOOR).ln());
                if j < last {
                    let fa = ev.h(Along::First, x, y, w)?;
                    let fb = ev.h(Along::Second, y, x, w)?;
                    let mut ca = e.cond.clone();
                    ca.push(e.b);
                    ca.sort_unstable();
                    let mut cb = e.cond.clone();
                    cb.push(e.a);
                    cb.sort_unstable();
                    store.insert((e.a, ca), fa);
                    store.insert((e.b, cb), fb);
                }
            }
            out.push(logs);
        }
        Ok(out)
    }

    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        Ok(self.edge_log_densities(u)?.iter().flatten().sum())
    }
}

/// Log density of a fitted vine at `u`.
pub fn vine_log_density(fv: &FittedVine, u: &[f64]) -> Result<f64> {
    VineEvaluator::new(fv)?.log_density(u)
}

impl FittedVine {
    /// Sum of the per-edge in-sample log-likelihoods.
    pub fn loglik(&self) -> f64 {
        self.edges.iter().flatten().map(|e| e.fit.loglik).sum()
    }

    pub fn conditional_edges(&self) -> usize {
        self.edges.iter().flatten().filter(|e| e.kind == EdgeKind::Conditional).count()
    }

    /// Checks the bookkeeping invariants of a fitted vine.
    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        if self.edges.len() != self.structure.trees.len() {
            return Err(Error::invalid("edge fits do not match the structure"));
        }
        for (j, (fits, edges)) in self.edges.iter().zip(&self.structure.trees).enumerate() {
            if fits.len() != edges.len() {
                return Err(Error::invalid("edge fits do not match the structure"));
            }
            for (fe, e) in fits.iter().zip(edges) {
                if &fe.edge != e {
                    return Err(Error::invalid(format!("edge {} out of order", fe.edge)));
                }
                let conditional = fe.kind == EdgeKind::Conditional;
                if conditional && (j == 0 || fe.reduction.is_none() || fe.fit.spec.arity != 3) {
                    return Err(Error::invalid(format!("edge {e}: inconsistent conditional fit")));
                }
                if !conditional && fe.fit.spec.arity != 2 {
                    return Err(Error::invalid(format!("edge {e}: partial fit must be bivariate")));
                }
                let rejected = fe.sa_test.as_ref().is_some_and(|t| t.reject);
                if self.mode == FitMode::Test && j > 0 && rejected != conditional {
                    return Err(Error::invalid(format!("edge {e}: flag disagrees with the test")));
                }
                if self.mode == FitMode::SimpA && conditional {
                    return Err(Error::invalid("SimpA vines have no conditional edges"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: FittedVine = serde_json::from_str(s)?;
        v.validate()?;
        Ok(v)
    }
}
