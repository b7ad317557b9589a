//! Dense strictly convex quadratic programs by the Goldfarb-Idnani dual
//! active-set method.
//!
//! ```text
//!     minimize    1/2 x' Q x - c' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x >= b_in
//! ```
//!
//! The solver keeps `J = L^{-T} Q_act` and the upper triangular `R` of the
//! active constraint normals, updating both with Givens rotations as
//! constraints enter and leave the active set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Primal feasibility tolerance on unit-normalized constraint rows.
const FEAS_TOL: f64 = 1e-12;
const MAX_ITERATIONS_PER_CONSTRAINT: usize = 20;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            q,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.c.len();
        let dims = [
            (self.q.nrows(), n),
            (self.q.ncols(), n),
            (self.a_eq.ncols(), n),
            (self.a_ineq.ncols(), n),
            (self.b_eq.len(), self.a_eq.nrows()),
            (self.b_ineq.len(), self.a_ineq.nrows()),
        ];
        for (found, expected) in dims {
            if found != expected {
                return Err(Error::DimensionMismatch { expected, found });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows (in input scaling).
    pub eq_multipliers: DVector<f64>,
    /// Multipliers of the inequality rows; zero for inactive rows.
    pub ineq_multipliers: DVector<f64>,
    /// Indices of inequality rows in the final active set.
    pub active: Vec<usize>,
    pub iterations: usize,
    /// Infinity norm of `Q x - c - A_eq' y - A_in' z`.
    pub kkt_residual: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Row {
    Eq(usize),
    Ineq(usize),
}

struct Workspace {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
}

#[inline]
fn hypot(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

impl Workspace {
    fn compute_d(&self, np: &[f64], d: &mut [f64]) {
        for (i, di) in d.iter_mut().enumerate() {
            *di = self.j.column(i).iter().zip(np).map(|(a, b)| a * b).sum();
        }
    }

    fn update_z(&self, d: &[f64], iq: usize, z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        for col in iq..self.n {
            let dc = d[col];
            if dc != 0.0 {
                for (zi, jv) in z.iter_mut().zip(self.j.column(col).iter()) {
                    *zi += jv * dc;
                }
            }
        }
    }

    fn update_r(&self, d: &[f64], iq: usize, r: &mut [f64]) {
        for i in (0..iq).rev() {
            let mut sum = d[i];
            for k in i + 1..iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
    }

    /// Appends the normal with `d = J' np` as column `iq`. Returns false when
    /// it is linearly dependent on the active normals.
    fn add_constraint(&mut self, d: &mut [f64], iq: &mut usize) -> bool {
        let n = self.n;
        let mut jj = n - 1;
        while jj > *iq {
            let cc0 = d[jj - 1];
            let ss0 = d[jj];
            let h = hypot(cc0, ss0);
            if h != 0.0 {
                d[jj] = 0.0;
                let mut ss = ss0 / h;
                let mut cc = cc0 / h;
                if cc < 0.0 {
                    cc = -cc;
                    ss = -ss;
                    d[jj - 1] = -h;
                } else {
                    d[jj - 1] = h;
                }
                let xny = ss / (1.0 + cc);
                for k in 0..n {
                    let t1 = self.j[(k, jj - 1)];
                    let t2 = self.j[(k, jj)];
                    let nv = t1 * cc + t2 * ss;
                    self.j[(k, jj - 1)] = nv;
                    self.j[(k, jj)] = xny * (t1 + nv) - t2;
                }
            }
            jj -= 1;
        }
        *iq += 1;
        for i in 0..*iq {
            self.r[(i, *iq - 1)] = d[i];
        }
        if d[*iq - 1].abs() <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(d[*iq - 1].abs());
        true
    }

    fn delete_constraint(
        &mut self,
        active: &mut [Row],
        u: &mut [f64],
        iq: &mut usize,
        row: Row,
    ) {
        let n = self.n;
        let qq = match active[..*iq].iter().position(|&a| a == row) {
            Some(p) => p,
            None => return,
        };
        for i in qq..*iq - 1 {
            active[i] = active[i + 1];
            u[i] = u[i + 1];
            for jr in 0..n {
                self.r[(jr, i)] = self.r[(jr, i + 1)];
            }
        }
        active[*iq - 1] = active[*iq];
        u[*iq - 1] = u[*iq];
        u[*iq] = 0.0;
        for jr in 0..*iq {
            self.r[(jr, *iq - 1)] = 0.0;
        }
        *iq -= 1;
        if *iq == 0 {
            return;
        }
        for jj in qq..*iq {
            let cc0 = self.r[(jj, jj)];
            let ss0 = self.r[(jj + 1, jj)];
            let h = hypot(cc0, ss0);
            if h == 0.0 {
                continue;
            }
            let mut cc = cc0 / h;
            let mut ss = ss0 / h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..*iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let nv = t1 * cc + t2 * ss;
                self.r[(jj, k)] = nv;
                self.r[(jj + 1, k)] = xny * (t1 + nv) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let nv = t1 * cc + t2 * ss;
                self.j[(k, jj)] = nv;
                self.j[(k, jj + 1)] = xny * (nv + t1) - t2;
            }
        }
    }
}

fn normalized_rows(a: &DMatrix<f64>, b: &DVector<f64>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut rows = Vec::with_capacity(a.nrows());
    let mut rhs = Vec::with_capacity(a.nrows());
    let mut scale = Vec::with_capacity(a.nrows());
    for i in 0..a.nrows() {
        let row: Vec<f64> = a.row(i).iter().copied().collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        rows.push(row.iter().map(|v| v * s).collect());
        rhs.push(b[i] * s);
        scale.push(s);
    }
    (rows, rhs, scale)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the quadratic program; `Q` must be symmetric positive definite.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    let n = p.c.len();
    let chol = p.q.clone().cholesky().ok_or(Error::Unbounded)?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
    let mut ws = Workspace {
        n,
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
    };

    let (eq_rows, eq_rhs, eq_scale) = normalized_rows(&p.a_eq, &p.b_eq);
    let (in_rows, in_rhs, in_scale) = normalized_rows(&p.a_ineq, &p.b_ineq);
    let me = eq_rows.len();
    let mi = in_rows.len();
    if me > n {
        return Err(Error::Infeasible(format!(
            "{me} equality constraints for {n} unknowns"
        )));
    }

    // Unconstrained minimizer x = Q^{-1} c.
    let mut x: Vec<f64> = chol.solve(&p.c).iter().copied().collect();

    let cap = n + 1;
    let mut active = vec![Row::Eq(0); cap + 1];
    let mut u = vec![0.0; cap + 1];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut r = vec![0.0; cap + 1];
    let mut iq = 0usize;

    for (i, np) in eq_rows.iter().enumerate() {
        ws.compute_d(np, &mut d);
        ws.update_z(&d, iq, &mut z);
        ws.update_r(&d, iq, &mut r);
        let zn = dot(&z, np);
        let t2 = if dot(&z, &z).abs() > f64::EPSILON {
            (eq_rhs[i] - dot(np, &x)) / zn
        } else {
            0.0
        };
        for k in 0..n {
            x[k] += t2 * z[k];
        }
        u[iq] = t2;
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        active[iq] = Row::Eq(i);
        if !ws.add_constraint(&mut d, &mut iq) {
            return Err(Error::Infeasible(
                "equality constraints are linearly dependent".into(),
            ));
        }
    }
    for (i, np) in eq_rows.iter().enumerate() {
        let res = (dot(np, &x) - eq_rhs[i]).abs();
        if res > 1e-8 {
            return Err(Error::Infeasible(format!(
                "equality row {i} has residual {res:e}"
            )));
        }
    }

    let mut is_active = vec![false; mi];
    let mut excluded = vec![false; mi];
    let mut s = vec![0.0; mi];
    let mut iterations = 0usize;
    let max_iterations = MAX_ITERATIONS_PER_CONSTRAINT * (mi + n + 1);

    'outer: loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(Error::Infeasible(format!(
                "active-set iterations exceeded {max_iterations}"
            )));
        }
        for (i, row) in in_rows.iter().enumerate() {
            s[i] = dot(row, &x) - in_rhs[i];
            excluded[i] = false;
        }
        let u_old: Vec<f64> = u[..iq].to_vec();
        let active_old: Vec<Row> = active[..iq].to_vec();
        let x_old = x.clone();

        'select: loop {
            let mut worst = -FEAS_TOL;
            let mut ip = None;
            for i in 0..mi {
                if !is_active[i] && !excluded[i] && s[i] < worst {
                    worst = s[i];
                    ip = Some(i);
                }
            }
            let ip = match ip {
                Some(ip) => ip,
                None => break 'outer,
            };
            let np = &in_rows[ip];
            u[iq] = 0.0;
            active[iq] = Row::Ineq(ip);

            loop {
                ws.compute_d(np, &mut d);
                ws.update_z(&d, iq, &mut z);
                ws.update_r(&d, iq, &mut r);

                let mut t1 = f64::INFINITY;
                let mut drop_row = None;
                for k in me..iq {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_row = Some(active[k]);
                        }
                    }
                }
                let t2 = if dot(&z, &z).abs() > f64::EPSILON {
                    -s[ip] / dot(&z, np)
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(Error::Infeasible(format!(
                        "inequality row {ip} cannot be satisfied"
                    )));
                }
                if !t2.is_finite() {
                    for k in 0..iq {
                        u[k] -= t * r[k];
                    }
                    u[iq] += t;
                    let row = drop_row.expect("finite partial step has a blocking row");
                    if let Row::Ineq(l) = row {
                        is_active[l] = false;
                    }
                    ws.delete_constraint(&mut active, &mut u, &mut iq, row);
                    continue;
                }
                for k in 0..n {
                    x[k] += t * z[k];
                }
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;
                if t == t2 || (t - t2).abs() <= f64::EPSILON * t2.abs().max(1.0) {
                    if !ws.add_constraint(&mut d, &mut iq) {
                        excluded[ip] = true;
                        ws.delete_constraint(&mut active, &mut u, &mut iq, Row::Ineq(ip));
                        for flag in is_active.iter_mut() {
                            *flag = false;
                        }
                        for k in me..iq {
                            active[k] = active_old[k];
                            u[k] = u_old[k];
                            if let Row::Ineq(l) = active[k] {
                                is_active[l] = true;
                            }
                        }
                        x.copy_from_slice(&x_old);
                        continue 'select;
                    }
                    is_active[ip] = true;
                    continue 'outer;
                }
                let row = drop_row.expect("partial step has a blocking row");
                if let Row::Ineq(l) = row {
                    is_active[l] = false;
                }
                ws.delete_constraint(&mut active, &mut u, &mut iq, row);
                s[ip] = dot(np, &x) - in_rhs[ip];
            }
        }
    }

    let xv = DVector::from_vec(x);
    let mut eq_mult = DVector::zeros(me);
    let mut in_mult = DVector::zeros(mi);
    let mut active_rows = Vec::new();
    for k in 0..iq {
        match active[k] {
            Row::Eq(i) => eq_mult[i] = u[k] * eq_scale[i],
            Row::Ineq(i) => {
                in_mult[i] = u[k] * in_scale[i];
                active_rows.push(i);
            }
        }
    }
    active_rows.sort_unstable();
    let grad = &p.q * &xv - &p.c;
    let resid = grad - p.a_eq.transpose() * &eq_mult - p.a_ineq.transpose() * &in_mult;
    let kkt_residual = resid.amax();
    let objective = 0.5 * xv.dot(&(&p.q * &xv)) - p.c.dot(&xv);
    Ok(QpSolution {
        x: xv,
        eq_multipliers: eq_mult,
        ineq_multipliers: in_mult,
        active: active_rows,
        iterations,
        kkt_residual,
        objective,
    })
}
