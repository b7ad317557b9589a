//! Ground-truth data generating processes: D-vines of Frank copulas whose
//! Kendall's τ varies with the conditioning variables, and two-component
//! Gaussian mixtures.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Below this |θ| the Frank copula is treated as the independence copula.
const THETA_EPS: f64 = 1e-8;

/// Generator for replicate `stream` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// First Debye function `D_1(x) = x^{-1} int_0^x t / (e^t - 1) dt`.
pub fn debye1(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x < 0.0 {
        return debye1(-x) - x / 2.0;
    }
    let integrand = |t: f64| if t == 0.0 { 1.0 } else { t / t.exp_m1() };
    quadrature::integrate(integrand, 0.0, x, 1e-14).integral / x
}

/// Kendall's τ of the Frank copula with parameter θ.
pub fn frank_theta_to_tau(theta: f64) -> f64 {
    if theta.abs() < 1e-6 {
        return theta / 9.0;
    }
    1.0 - 4.0 / theta * (1.0 - debye1(theta))
}

/// Frank parameter with the given Kendall's τ, by bisection to 1e-10.
pub fn frank_tau_to_theta(tau: f64) -> Result<f64> {
    if !(tau > -1.0 && tau < 1.0) {
        return Err(Error::invalid(format!("Kendall's tau {tau} outside (-1, 1)")));
    }
    if tau == 0.0 {
        return Ok(0.0);
    }
    if tau < 0.0 {
        return frank_tau_to_theta(-tau).map(|t| -t);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while frank_theta_to_tau(hi) < tau {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::invalid(format!("Kendall's tau {tau} too close to 1")));
        }
    }
    while hi - lo > 1e-11 {
        let mid = 0.5 * (lo + hi);
        if frank_theta_to_tau(mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Frank copula density.
pub fn frank_density(u: f64, v: f64, theta: f64) -> f64 {
    if theta.abs() < THETA_EPS {
        return 1.0;
    }
    let a = -(-theta).exp_m1();
    let au = -(-theta * u).exp_m1();
    let av = -(-theta * v).exp_m1();
    let denom = a - au * av;
    theta * a * (-theta * (u + v)).exp() / (denom * denom)
}

/// Conditional distribution `h(u | v) = dC(u, v) / dv` of the Frank copula.
pub fn frank_h(u: f64, v: f64, theta: f64) -> f64 {
    if theta.abs() < THETA_EPS {
        return u;
    }
    let a = -(-theta).exp_m1();
    let au = -(-theta * u).exp_m1();
    let av = -(-theta * v).exp_m1();
    ((-theta * v).exp() * au / (a - au * av)).clamp(0.0, 1.0)
}

/// Inverse of [`frank_h`] in its first argument.
pub fn frank_h_inverse(p: f64, v: f64, theta: f64) -> f64 {
    if theta.abs() < THETA_EPS {
        return p;
    }
    let a = -(-theta).exp_m1();
    let av = -(-theta * v).exp_m1();
    let au = p * a / ((-theta * v).exp() + p * av);
    (-(-au).ln_1p() / theta).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrankCase {
    /// τ(m) = 8β(m - 0.5)² - β
    A,
    /// τ(m) = β - 2βm
    B,
}

/// D-vine of Frank copulas on variables in natural order. Tree 1 has
/// constant τ; conditional edges take τ from the mean of their
/// conditioning values. A zero β gives a simplified vine with independent
/// higher trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrankVineSpec {
    pub dim: usize,
    pub case: FrankCase,
    pub beta: f64,
    pub tree1_tau: f64,
    /// Constant τ for the higher trees, replacing the schedule when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_tau: Option<f64>,
}

impl FrankVineSpec {
    pub fn new(dim: usize, case: FrankCase, beta: f64) -> Result<Self> {
        let s = FrankVineSpec {
            dim,
            case,
            beta,
            tree1_tau: 0.25,
            constant_tau: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// A simplified vine: every conditional edge has the same τ.
    pub fn simplified(dim: usize, tau: f64) -> Result<Self> {
        let s = FrankVineSpec {
            dim,
            case: FrankCase::B,
            beta: 0.0,
            tree1_tau: 0.25,
            constant_tau: Some(tau),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid("Frank vine needs at least two variables"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.tree1_tau.abs() < 1.0) {
            return Err(Error::invalid("tree-1 tau must lie in (-1, 1)"));
        }
        if let Some(t) = self.constant_tau {
            if !(t.abs() < 1.0) {
                return Err(Error::invalid("constant tau must lie in (-1, 1)"));
            }
        }
        Ok(())
    }
}

/// Kendall's τ of a D-vine edge in `tree` (1-based) given its conditioning
/// values.
pub fn tau_schedule(spec: &FrankVineSpec, tree: usize, cond: &[f64]) -> f64 {
    if tree <= 1 || cond.is_empty() {
        return spec.tree1_tau;
    }
    if let Some(t) = spec.constant_tau {
        return t;
    }
    let m = cond.iter().sum::<f64>() / cond.len() as f64;
    let b = spec.beta;
    match spec.case {
        FrankCase::A => 8.0 * b * (m - 0.5) * (m - 0.5) - b,
        FrankCase::B => b - 2.0 * b * m,
    }
}

fn edge_theta(spec: &FrankVineSpec, u: &[f64], i: usize, m: usize) -> f64 {
    let tree = m - i;
    let tau = tau_schedule(spec, tree, &u[i + 1..m]);
    cached_theta(tau)
}

fn cached_theta(tau: f64) -> f64 {
    thread_local! {
        static CACHE: RefCell<HashMap<u64, f64>> = RefCell::new(HashMap::new());
    }
    CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if let Some(&t) = c.get(&tau.to_bits()) {
            return t;
        }
        if c.len() >= 1 << 12 {
            c.clear();
        }
        // the schedule keeps |tau| <= beta < 1
        let t = frank_tau_to_theta(tau).expect("tau schedule stays inside (-1, 1)");
        c.insert(tau.to_bits(), t);
        t
    })
}

/// Exact D-vine recursion state for one observation: `a[i][m] = F(u_i |
/// u_{i+1..m})` and `b[i][m] = F(u_m | u_{i..m-1})`.
struct Recursion {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Recursion {
    fn new(p: usize) -> Self {
        Recursion {
            a: vec![vec![0.0; p]; p],
            b: vec![vec![0.0; p]; p],
        }
    }

    /// Given `u_m` and the state for variables `< m`, fills column `m` and
    /// returns the log density contributions of the new edges.
    fn extend(&mut self, spec: &FrankVineSpec, u: &[f64], m: usize, thetas: &mut Vec<f64>) -> f64 {
        self.a[m][m] = u[m];
        self.b[m][m] = u[m];
        thetas.clear();
        for i in 0..m {
            thetas.push(edge_theta(spec, u, i, m));
        }
        let mut logd = 0.0;
        for i in (0..m).rev() {
            let x = self.a[i][m - 1];
            let y = self.b[i + 1][m];
            let th = thetas[i];
            logd += frank_density(x, y, th).ln();
            self.a[i][m] = frank_h(x, y, th);
            self.b[i][m] = frank_h(y, x, th);
        }
        logd
    }
}

/// Draws `n` observations (rows) from the Frank D-vine by inverting the
/// conditional distribution chain.
pub fn simulate_frank_vine(spec: &FrankVineSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    simulate_frank_vine_with(spec, n, &mut replicate_rng(seed, 0))
}

pub fn simulate_frank_vine_with<R: Rng>(spec: &FrankVineSpec, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let p = spec.dim;
    let mut out = DMatrix::zeros(n, p);
    let mut rec = Recursion::new(p);
    let mut thetas = Vec::with_capacity(p);
    let mut u = vec![0.0; p];
    for row in 0..n {
        let w: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        u[0] = w[0];
        rec.a[0][0] = u[0];
        rec.b[0][0] = u[0];
        for m in 1..p {
            // b[0][m] = w_m; peel off one conditioning variable per step
            let mut target = w[m];
            for i in 0..m {
                let th = edge_theta(spec, &u, i, m);
                target = frank_h_inverse(target, rec.a[i][m - 1], th);
            }
            u[m] = target;
            rec.extend(spec, &u, m, &mut thetas);
        }
        for j in 0..p {
            out[(row, j)] = u[j];
        }
    }
    Ok(out)
}

/// Log density of the Frank D-vine at `u`.
pub fn frank_vine_log_density(spec: &FrankVineSpec, u: &[f64]) -> f64 {
    let p = spec.dim;
    let mut rec = Recursion::new(p);
    let mut thetas = Vec::with_capacity(p);
    rec.a[0][0] = u[0];
    rec.b[0][0] = u[0];
    let mut total = 0.0;
    for m in 1..p {
        total += rec.extend(spec, u, m, &mut thetas);
    }
    total
}

pub fn frank_vine_density(spec: &FrankVineSpec, u: &[f64]) -> f64 {
    frank_vine_log_density(spec, u).exp()
}

/// Equally weighted mixture of two multivariate normal distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMixtureSpec {
    pub dim: usize,
    pub means: [Vec<f64>; 2],
    /// Row-major covariance matrices.
    pub covariances: [Vec<f64>; 2],
    pub weights: [f64; 2],
}

fn equicorrelated(p: usize, diag_shift: f64, all: f64) -> Vec<f64> {
    (0..p * p)
        .map(|k| if k / p == k % p { all + diag_shift } else { all })
        .collect()
}

impl NormalMixtureSpec {
    /// Three-dimensional mixture with exchangeable covariances.
    pub fn three_d() -> Self {
        NormalMixtureSpec {
            dim: 3,
            means: [vec![1.0; 3], vec![-1.0; 3]],
            covariances: [equicorrelated(3, 1.4, -0.4), equicorrelated(3, 0.6, 0.4)],
            weights: [0.5, 0.5],
        }
    }

    /// Five-dimensional mixture.
    pub fn five_d() -> Self {
        let vech = [
            1.0, -0.4, -0.4, -0.2, -0.1, 1.0, -0.4, -0.2, -0.1, 1.0, -0.2, -0.1, 1.0, -0.1, 1.0,
        ];
        let mut s2 = vec![0.0; 25];
        let mut k = 0;
        for c in 0..5 {
            for r in c..5 {
                s2[r * 5 + c] = vech[k];
                s2[c * 5 + r] = vech[k];
                k += 1;
            }
        }
        NormalMixtureSpec {
            dim: 5,
            means: [vec![-1.0; 5], vec![1.0; 5]],
            covariances: [equicorrelated(5, 0.6, 0.4), s2],
            weights: [0.5, 0.5],
        }
    }

    pub fn preset(dim: usize) -> Result<Self> {
        match dim {
            3 => Ok(Self::three_d()),
            5 => Ok(Self::five_d()),
            _ => Err(Error::invalid(format!("no normal-mixture preset for dimension {dim}"))),
        }
    }

    fn covariance(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.covariances[k])
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim;
        if p < 2 {
            return Err(Error::invalid("mixture needs at least two variables"));
        }
        for k in 0..2 {
            if self.means[k].len() != p || self.covariances[k].len() != p * p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: self.means[k].len(),
                });
            }
            let c = self.covariance(k);
            if (&c - c.transpose()).amax() > 1e-12 || c.cholesky().is_none() {
                return Err(Error::invalid(format!(
                    "covariance of component {} is not symmetric positive definite",
                    k + 1
                )));
            }
        }
        let w = self.weights;
        if !(w[0] > 0.0 && w[1] > 0.0 && (w[0] + w[1] - 1.0).abs() < 1e-12) {
            return Err(Error::invalid("mixture weights must be positive and sum to one"));
        }
        Ok(())
    }
}

/// Precomputed factorizations of a mixture.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub spec: NormalMixtureSpec,
    chol: [DMatrix<f64>; 2],
    log_norm: [f64; 2],
    margins: Vec<[Normal; 2]>,
}

impl Mixture {
    pub fn new(spec: NormalMixtureSpec) -> Result<Self> {
        spec.validate()?;
        let p = spec.dim;
        let mut chol = Vec::new();
        let mut log_norm = [0.0; 2];
        for k in 0..2 {
            let l = spec.covariance(k).cholesky().expect("validated").l();
            let log_det: f64 = (0..p).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            log_norm[k] = spec.weights[k].ln() - 0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            chol.push(l);
        }
        let margins = (0..p)
            .map(|i| {
                let mk = |k: usize| {
                    let sd = spec.covariances[k][i * p + i].sqrt();
                    Normal::new(spec.means[k][i], sd).expect("positive variance")
                };
                [mk(0), mk(1)]
            })
            .collect();
        Ok(Mixture {
            chol: [chol[0].clone(), chol[1].clone()],
            log_norm,
            margins,
            spec,
        })
    }

    fn log_joint(&self, x: &DVector<f64>) -> f64 {
        let mut terms = [0.0; 2];
        for (k, term) in terms.iter_mut().enumerate() {
            let diff = x - DVector::from_column_slice(&self.spec.means[k]);
            let z = self.chol[k].solve_lower_triangular(&diff).expect("nonsingular factor");
            *term = self.log_norm[k] - 0.5 * z.norm_squared();
        }
        log_sum_exp(terms[0], terms[1])
    }

    pub fn margin_cdf(&self, i: usize, x: f64) -> f64 {
        let w = self.spec.weights;
        w[0] * self.margins[i][0].cdf(x) + w[1] * self.margins[i][1].cdf(x)
    }

    fn margin_log_pdf(&self, i: usize, x: f64) -> f64 {
        let w = self.spec.weights;
        log_sum_exp(
            w[0].ln() + self.margins[i][0].ln_pdf(x),
            w[1].ln() + self.margins[i][1].ln_pdf(x),
        )
    }

    /// Marginal quantile by bracketed bisection.
    pub fn margin_quantile(&self, i: usize, u: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0, 1.0);
        while self.margin_cdf(i, lo) > u {
            lo *= 2.0;
        }
        while self.margin_cdf(i, hi) < u {
            hi *= 2.0;
        }
        while hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            let mid = 0.5 * (lo + hi);
            if self.margin_cdf(i, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Log copula density at `u`.
    pub fn copula_log_density(&self, u: &[f64]) -> f64 {
        let p = self.spec.dim;
        let x = DVector::from_iterator(p, (0..p).map(|i| self.margin_quantile(i, u[i])));
        let marg: f64 = (0..p).map(|i| self.margin_log_pdf(i, x[i])).sum();
        self.log_joint(&x) - marg
    }

    /// Raw draws and their copula-scale transforms, plus component labels.
    pub fn simulate_with<R: Rng>(&self, n: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
        let p = self.spec.dim;
        let mut raw = DMatrix::zeros(n, p);
        let mut cop = DMatrix::zeros(n, p);
        let mut labels = Vec::with_capacity(n);
        for row in 0..n {
            let k = if rng.random::<f64>() < self.spec.weights[0] { 0 } else { 1 };
            labels.push(k);
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = &self.chol[k] * z + DVector::from_column_slice(&self.spec.means[k]);
            for j in 0..p {
                raw[(row, j)] = x[j];
                cop[(row, j)] = self.margin_cdf(j, x[j]);
            }
        }
        (raw, cop, labels)
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Raw (`n x p`) and copula-scale (`n x p`) samples from the mixture.
pub fn simulate_normal_mixture(spec: &NormalMixtureSpec, n: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mix = Mixture::new(spec.clone())?;
    let (raw, cop, _) = mix.simulate_with(n, &mut replicate_rng(seed, 0));
    Ok((raw, cop))
}

pub fn mixture_copula_density(spec: &NormalMixtureSpec, u: &[f64]) -> Result<f64> {
    Ok(Mixture::new(spec.clone())?.copula_log_density(u).exp())
}

/// A simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DgpSpec {
    Frank(FrankVineSpec),
    Mixture(NormalMixtureSpec),
}

/// A DGP ready for repeated sampling and density evaluation.
#[derive(Debug, Clone)]
pub enum Dgp {
    Frank(FrankVineSpec),
    Mixture(Box<Mixture>),
}

impl DgpSpec {
    pub fn dim(&self) -> usize {
        match self {
            DgpSpec::Frank(s) => s.dim,
            DgpSpec::Mixture(s) => s.dim,
        }
    }

    pub fn build(&self) -> Result<Dgp> {
        match self {
            DgpSpec::Frank(s) => {
                s.validate()?;
                Ok(Dgp::Frank(*s))
            }
            DgpSpec::Mixture(s) => Ok(Dgp::Mixture(Box::new(Mixture::new(s.clone())?))),
        }
    }
}

impl Dgp {
    pub fn dim(&self) -> usize {
        match self {
            Dgp::Frank(s) => s.dim,
            Dgp::Mixture(m) => m.spec.dim,
        }
    }

    /// Copula-scale sample (rows are observations).
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        match self {
            Dgp::Frank(s) => simulate_frank_vine_with(s, n, rng),
            Dgp::Mixture(m) => Ok(m.simulate_with(n, rng).1),
        }
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        match self {
            Dgp::Frank(s) => frank_vine_log_density(s, u),
            Dgp::Mixture(m) => m.copula_log_density(u),
        }
    }
}

impl fmt::Display for DgpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DgpSpec::Frank(s) => {
                let case = match s.case {
                    FrankCase::A => "a",
                    FrankCase::B => "b",
                };
                match s.constant_tau {
                    Some(t) => write!(f, "frank:p={},tau={}", s.dim, t),
                    None => write!(f, "frank:p={},case={},beta={}", s.dim, case, s.beta),
                }
            }
            DgpSpec::Mixture(s) => write!(f, "mixture:p={}", s.dim),
        }
    }
}

/// Parses `frank:p=3,case=b,beta=0.6`, `frank:p=3,tau=0.2` (simplified) or
/// `mixture:p=3`.
impl FromStr for DgpSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut p = None;
        let mut case = None;
        let mut beta = None;
        let mut tau = None;
        for kv in rest.split(',').filter(|x| !x.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in DGP spec, got {kv:?}")))?;
            let bad = |_| Error::invalid(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "p" => p = Some(v.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "case" => {
                    case = Some(match v.trim() {
                        "a" | "A" => FrankCase::A,
                        "b" | "B" => FrankCase::B,
                        _ => return Err(Error::invalid(format!("unknown case {v:?}"))),
                    })
                }
                "beta" => beta = Some(v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "tau" => tau = Some(v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?),
                other => return Err(Error::invalid(format!("unknown DGP key {other:?}"))),
            }
        }
        match kind.trim() {
            "frank" => {
                let p = p.unwrap_or(3);
                match tau {
                    Some(t) => Ok(DgpSpec::Frank(FrankVineSpec::simplified(p, t)?)),
                    None => Ok(DgpSpec::Frank(FrankVineSpec::new(
                        p,
                        case.unwrap_or(FrankCase::B),
                        beta.unwrap_or(0.6),
                    )?)),
                }
            }
            "mixture" => Ok(DgpSpec::Mixture(NormalMixtureSpec::preset(p.unwrap_or(3))?)),
            other => Err(Error::invalid(format!("unknown DGP kind {other:?}"))),
        }
    }
}
