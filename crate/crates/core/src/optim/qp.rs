//! Primal active-set method for convex quadratic programs
//!
//! ```text
//! minimize    ½ xᵀQx + cᵀx
//! subject to  A_eq x  = b_eq
//!             A_in x ≤ b_in
//!             l ≤ x ≤ u
//! ```
//!
//! Bounds in the working set fix variables, so the equality-constrained
//! subproblem is solved on the free variables only: the reduced Hessian is
//! held as a Cholesky factor that is updated when a variable is fixed or
//! released, and the general working rows enter through a small Schur
//! complement. Merely positive semidefinite Hessians are handled by an outer
//! proximal-point loop, which keeps every subproblem strictly convex.

use nalgebra::{DMatrix, DVector};

use super::cholesky::UpdatableCholesky;
use super::{norm_inf, ActiveConstraint, Solution, SolveError, SolveStatus};

const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric n×n matrix Q.
    pub quadratic: DMatrix<f64>,
    /// Linear term c.
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// Per-variable lower bounds (`-inf` when absent).
    pub lower: DVector<f64>,
    /// Per-variable upper bounds (`+inf` when absent).
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(quadratic: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            quadratic,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.quadratic * &xv)) + self.linear.dot(&xv)
    }

    /// Largest constraint violation at `x`, relative to the row scale.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        Dense::from_problem(self).max_violation(x)
    }

    fn validate(&self) -> Result<(), SolveError> {
        let n = self.dim();
        let dim_err = |what: &str| Err(SolveError::Dimension(what.to_string()));
        if self.quadratic.nrows() != n || self.quadratic.ncols() != n {
            return dim_err("quadratic term must be n×n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return dim_err("equality constraints");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return dim_err("inequality constraints");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return dim_err("bounds");
        }
        let scale = self.quadratic.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.quadratic[(i, j)] - self.quadratic[(j, i)]).abs() > 1e-10 * scale {
                    return Err(SolveError::Invalid(format!(
                        "quadratic term not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !self.quadratic.iter().all(|x| x.is_finite())
            || !finite(&self.linear)
            || !self.eq_matrix.iter().all(|x| x.is_finite())
            || !finite(&self.eq_rhs)
            || !self.ineq_matrix.iter().all(|x| x.is_finite())
            || !finite(&self.ineq_rhs)
        {
            return Err(SolveError::Invalid("non-finite problem data".into()));
        }
        for i in 0..n {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY
            {
                return Err(SolveError::Infeasible {
                    violation: l - u,
                    violated: vec![format!("bounds of x[{i}]")],
                });
            }
        }
        Ok(())
    }
}

/// Row-major copy of the problem with sparse row patterns.
struct Dense {
    n: usize,
    q: Vec<f64>,
    c: Vec<f64>,
    eq: Vec<Row>,
    ineq: Vec<Row>,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

struct Row {
    coef: Vec<f64>,
    nz: Vec<usize>,
    rhs: f64,
    norm: f64,
}

impl Row {
    fn new(coef: Vec<f64>, rhs: f64) -> Self {
        let nz: Vec<usize> = (0..coef.len()).filter(|&i| coef[i] != 0.0).collect();
        let norm = nz.iter().map(|&i| coef[i] * coef[i]).sum::<f64>().sqrt();
        Self { coef, nz, rhs, norm }
    }

    fn dot(&self, x: &[f64]) -> f64 {
        self.nz.iter().map(|&i| self.coef[i] * x[i]).sum()
    }

    fn scale_at(&self, x: &[f64]) -> f64 {
        let s: f64 = self.nz.iter().map(|&i| (self.coef[i] * x[i]).abs()).sum();
        s.max(self.rhs.abs()).max(1.0)
    }
}

impl Dense {
    fn from_problem(p: &QpProblem) -> Self {
        let n = p.dim();
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                q[i * n + j] = 0.5 * (p.quadratic[(i, j)] + p.quadratic[(j, i)]);
            }
        }
        let rows = |a: &DMatrix<f64>, b: &DVector<f64>| -> Vec<Row> {
            (0..a.nrows())
                .map(|r| Row::new(a.row(r).iter().copied().collect(), b[r]))
                .collect()
        };
        Self {
            n,
            q,
            c: p.linear.iter().copied().collect(),
            eq: rows(&p.eq_matrix, &p.eq_rhs),
            ineq: rows(&p.ineq_matrix, &p.ineq_rhs),
            lb: p.lower.iter().copied().collect(),
            ub: p.upper.iter().copied().collect(),
        }
    }

    fn q_scale(&self) -> f64 {
        (0..self.n).fold(1.0_f64, |m, i| m.max(self.q[i * self.n + i].abs()))
    }

    fn q_times(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let row = &self.q[i * n..(i + 1) * n];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let qx = self.q_times(x);
        0.5 * super::dot(x, &qx) + super::dot(&self.c, x)
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v = 0.0_f64;
        for r in &self.eq {
            v = v.max((r.dot(x) - r.rhs).abs() / r.scale_at(x));
        }
        for r in &self.ineq {
            v = v.max((r.dot(x) - r.rhs).max(0.0) / r.scale_at(x));
        }
        for i in 0..self.n {
            let s = x[i].abs().max(1.0);
            v = v.max((self.lb[i] - x[i]).max(0.0) / s);
            v = v.max((x[i] - self.ub[i]).max(0.0) / s);
        }
        v
    }

    /// Cholesky with a relative pivot threshold; `true` when Q is
    /// numerically positive definite.
    fn positive_definite(&self) -> bool {
        let n = self.n;
        let tol = 1e-10 * self.q_scale();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = self.q[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= tol {
                return false;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = self.q[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Free,
    Lower,
    Upper,
    Fixed,
}

struct ActiveSet<'a> {
    prob: &'a Dense,
    rho: f64,
    anchor: Vec<f64>,
    x: Vec<f64>,
    state: Vec<VarState>,
    free: Vec<usize>,
    active_ineq: Vec<usize>,
    chol: UpdatableCholesky,
    iterations: usize,
    // multipliers from the last stationary point: equalities then active inequalities
    row_mult: Vec<f64>,
}

enum Outcome {
    Converged,
    MaxIterations,
}

impl<'a> ActiveSet<'a> {
    fn new(prob: &'a Dense, rho: f64, mut x: Vec<f64>) -> Result<Self, SolveError> {
        let n = prob.n;
        let mut state = vec![VarState::Free; n];
        for i in 0..n {
            if prob.lb[i] == prob.ub[i] {
                state[i] = VarState::Fixed;
                x[i] = prob.lb[i];
            }
        }
        // candidate bounds active at the start point
        let at_bound: Vec<(usize, VarState)> = (0..n)
            .filter(|&i| state[i] == VarState::Free)
            .filter_map(|i| {
                let tol = 1e-12 * x[i].abs().max(1.0);
                if x[i] <= prob.lb[i] + tol {
                    Some((i, VarState::Lower))
                } else if x[i] >= prob.ub[i] - tol {
                    Some((i, VarState::Upper))
                } else {
                    None
                }
            })
            .collect();
        let mut free_mask: Vec<bool> = state.iter().map(|s| *s == VarState::Free).collect();
        if rank_restricted(&prob.eq, &free_mask) < prob.eq.len() {
            return Err(SolveError::Invalid(
                "equality constraints are linearly dependent on the non-fixed variables".into(),
            ));
        }
        for (i, side) in at_bound {
            free_mask[i] = false;
            if prob.eq.is_empty() || rank_restricted(&prob.eq, &free_mask) == prob.eq.len() {
                state[i] = side;
                x[i] = if side == VarState::Lower { prob.lb[i] } else { prob.ub[i] };
            } else {
                free_mask[i] = true;
            }
        }
        let mut ws = Self {
            prob,
            rho,
            anchor: x.clone(),
            x,
            state,
            free: Vec::new(),
            active_ineq: Vec::new(),
            chol: UpdatableCholesky::new(),
            iterations: 0,
            row_mult: Vec::new(),
        };
        for i in 0..n {
            if ws.state[i] == VarState::Free {
                ws.release(i)?;
            }
        }
        Ok(ws)
    }

    fn h(&self, i: usize, j: usize) -> f64 {
        let v = self.prob.q[i * self.prob.n + j];
        if i == j {
            v + self.rho
        } else {
            v
        }
    }

    fn release(&mut self, i: usize) -> Result<(), SolveError> {
        let cross: Vec<f64> = self.free.iter().map(|&j| self.h(i, j)).collect();
        let min_pivot = 1e-7 * self.h(i, i).abs().max(self.rho).sqrt().max(1e-150);
        if !self.chol.append(&cross, self.h(i, i), min_pivot) {
            return Err(SolveError::Numerical(format!(
                "reduced Hessian lost positive definiteness when releasing x[{i}]"
            )));
        }
        self.free.push(i);
        self.state[i] = VarState::Free;
        Ok(())
    }

    fn fix(&mut self, i: usize, side: VarState) {
        let pos = self.free.iter().position(|&j| j == i).expect("variable is free");
        self.chol.delete(pos);
        self.free.remove(pos);
        self.state[i] = side;
        self.x[i] = if side == VarState::Lower { self.prob.lb[i] } else { self.prob.ub[i] };
    }

    fn gradient(&self) -> Vec<f64> {
        let mut g = self.prob.q_times(&self.x);
        for i in 0..self.prob.n {
            g[i] += self.prob.c[i] + self.rho * (self.x[i] - self.anchor[i]);
        }
        g
    }

    fn working_rows(&self) -> Vec<&Row> {
        self.prob
            .eq
            .iter()
            .chain(self.active_ineq.iter().map(|&j| &self.prob.ineq[j]))
            .collect()
    }

    /// Newton step on the current working set and its row multipliers.
    ///
    /// Working rows are enforced as `A (x + d) = b`, which also removes any
    /// drift accumulated by earlier steps; one refinement pass restores the
    /// null-space condition lost to cancellation when the Hessian is small.
    fn eqp(&self, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
        let nf = self.free.len();
        let mut zg: Vec<f64> = self.free.iter().map(|&i| g[i]).collect();
        self.chol.forward_in_place(&mut zg);
        let rows = self.working_rows();
        let m = rows.len();
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        for row in &rows {
            let mut a: Vec<f64> = self.free.iter().map(|&i| row.coef[i]).collect();
            self.chol.forward_in_place(&mut a);
            z.push(a);
        }
        let step_from = |mu: &[f64]| -> Vec<f64> {
            let mut w = zg.clone();
            for (r, zr) in z.iter().enumerate() {
                for k in 0..nf {
                    w[k] += mu[r] * zr[k];
                }
            }
            self.chol.backward_in_place(&mut w);
            let mut d = vec![0.0; self.prob.n];
            for (k, &i) in self.free.iter().enumerate() {
                d[i] = -w[k];
            }
            d
        };
        if m == 0 {
            return Ok((step_from(&[]), Vec::new()));
        }
        let s = DMatrix::from_fn(m, m, |r, c| super::dot(&z[r], &z[c]));
        let solve_s = {
            let chol = s.clone().cholesky();
            let lu = s.lu();
            move |b: DVector<f64>| -> Option<DVector<f64>> {
                match &chol {
                    Some(ch) => Some(ch.solve(&b)),
                    None => lu.solve(&b),
                }
            }
        };
        let singular = || SolveError::Numerical("singular working-set Schur complement".into());
        let resid: Vec<f64> = rows.iter().map(|r| r.rhs - r.dot(&self.x)).collect();
        let rhs = DVector::from_fn(m, |r, _| -super::dot(&z[r], &zg) - resid[r]);
        let mut mu: Vec<f64> = solve_s(rhs).ok_or_else(singular)?.iter().copied().collect();
        let d = step_from(&mu);
        let err = DVector::from_fn(m, |r, _| resid[r] - rows[r].dot(&d));
        if err.amax() > 0.0 {
            let w = solve_s(err).ok_or_else(singular)?;
            for r in 0..m {
                mu[r] -= w[r];
            }
            return Ok((step_from(&mu), mu));
        }
        Ok((d, mu))
    }

    fn run(&mut self, max_iter: usize) -> Result<Outcome, SolveError> {
        let prob = self.prob;
        let n = prob.n;
        let mut local_iter = 0;
        loop {
            if local_iter >= max_iter {
                return Ok(Outcome::MaxIterations);
            }
            local_iter += 1;
            self.iterations += 1;
            let g = self.gradient();
            let (d, mu) = self.eqp(&g)?;
            let xnorm = norm_inf(&self.x);
            let g_after = if norm_inf(&d) > 1e-14 * (1.0 + xnorm) {
                let (alpha, block) = self.ratio_test(&d);
                for i in 0..n {
                    self.x[i] += alpha * d[i];
                }
                match block {
                    Some(Blocking::Bound(i, side)) => {
                        self.fix(i, side);
                        continue;
                    }
                    Some(Blocking::Row(j)) => {
                        self.active_ineq.push(j);
                        continue;
                    }
                    None => self.gradient(),
                }
            } else {
                g
            };
            // stationary on the working set: inspect multiplier signs
            let rows = self.working_rows();
            let gscale = norm_inf(&g_after).max(norm_inf(&prob.c)).max(1.0);
            let tol = 1e-10 * gscale;
            let mut worst: Option<(f64, Drop)> = None;
            let n_eq = prob.eq.len();
            for (k, &j) in self.active_ineq.iter().enumerate() {
                let m = mu[n_eq + k] / prob.ineq[j].norm.max(1e-300);
                if m < -tol && worst.as_ref().is_none_or(|(w, _)| m < *w) {
                    worst = Some((m, Drop::Row(k)));
                }
            }
            for i in 0..n {
                let side = self.state[i];
                if side != VarState::Lower && side != VarState::Upper {
                    continue;
                }
                let s = g_after[i] + rows.iter().zip(&mu).map(|(r, m)| m * r.coef[i]).sum::<f64>();
                let nu = if side == VarState::Lower { s } else { -s };
                if nu < -tol && worst.as_ref().is_none_or(|(w, _)| nu < *w) {
                    worst = Some((nu, Drop::Bound(i)));
                }
            }
            drop(rows);
            match worst {
                None => {
                    self.row_mult = mu;
                    return Ok(Outcome::Converged);
                }
                Some((_, Drop::Row(k))) => {
                    self.active_ineq.remove(k);
                }
                Some((_, Drop::Bound(i))) => {
                    self.release(i)?;
                }
            }
        }
    }

    fn ratio_test(&self, d: &[f64]) -> (f64, Option<Blocking>) {
        let prob = self.prob;
        let mut alpha = 1.0;
        let mut block = None;
        for &i in &self.free {
            let di = d[i];
            if di < 0.0 && prob.lb[i].is_finite() {
                let t = ((prob.lb[i] - self.x[i]) / di).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some(Blocking::Bound(i, VarState::Lower));
                }
            } else if di > 0.0 && prob.ub[i].is_finite() {
                let t = ((prob.ub[i] - self.x[i]) / di).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some(Blocking::Bound(i, VarState::Upper));
                }
            }
        }
        let dn = super::dot(d, d).sqrt();
        for (j, row) in prob.ineq.iter().enumerate() {
            if self.active_ineq.contains(&j) {
                continue;
            }
            let ad = row.dot(d);
            if ad > 1e-12 * row.norm * dn {
                let t = ((row.rhs - row.dot(&self.x)) / ad).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some(Blocking::Row(j));
                }
            }
        }
        (alpha, block)
    }

    fn active_list(&self) -> Vec<ActiveConstraint> {
        let mut out: Vec<ActiveConstraint> = (0..self.prob.n)
            .filter_map(|i| match self.state[i] {
                VarState::Lower => Some(ActiveConstraint::Lower(i)),
                VarState::Upper => Some(ActiveConstraint::Upper(i)),
                _ => None,
            })
            .collect();
        let mut rows = self.active_ineq.clone();
        rows.sort_unstable();
        out.extend(rows.into_iter().map(ActiveConstraint::Inequality));
        out
    }

    /// Scaled KKT residual of the original (non-proximal) problem.
    fn kkt_residual(&self) -> f64 {
        let prob = self.prob;
        let n = prob.n;
        let mut g = prob.q_times(&self.x);
        for i in 0..n {
            g[i] += prob.c[i];
        }
        let gscale = norm_inf(&g).max(norm_inf(&prob.c)).max(1.0);
        let rows = self.working_rows();
        let mu = &self.row_mult;
        let mut res = 0.0_f64;
        for i in 0..n {
            let s = g[i] + rows.iter().zip(mu).map(|(r, m)| m * r.coef[i]).sum::<f64>();
            let r = match self.state[i] {
                VarState::Free => s.abs(),
                VarState::Lower => (-s).max(0.0),
                VarState::Upper => s.max(0.0),
                VarState::Fixed => 0.0,
            };
            res = res.max(r / gscale);
        }
        let n_eq = prob.eq.len();
        for (k, &j) in self.active_ineq.iter().enumerate() {
            let m = mu.get(n_eq + k).copied().unwrap_or(0.0);
            res = res.max((-m).max(0.0) / gscale);
            let row = &prob.ineq[j];
            let slack = (row.rhs - row.dot(&self.x)).abs() / row.scale_at(&self.x);
            res = res.max(slack * m.abs() / gscale);
        }
        res.max(prob.max_violation(&self.x))
    }
}

enum Blocking {
    Bound(usize, VarState),
    Row(usize),
}

enum Drop {
    Row(usize),
    Bound(usize),
}

/// Numerical rank of the rows restricted to the masked columns.
fn rank_restricted(rows: &[Row], mask: &[bool]) -> usize {
    let cols: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return 0;
    }
    let a = DMatrix::from_fn(rows.len(), cols.len(), |r, c| rows[r].coef[cols[c]]);
    if cols.is_empty() {
        return 0;
    }
    let scale = a.amax().max(1e-300);
    a.svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * scale)
        .count()
}

/// Find a feasible point, preferring the origin projected onto the bounds.
fn initial_point(prob: &Dense) -> Result<Vec<f64>, SolveError> {
    let x0: Vec<f64> = (0..prob.n).map(|i| 0.0_f64.clamp(prob.lb[i], prob.ub[i])).collect();
    if prob.max_violation(&x0) <= FEAS_TOL {
        return Ok(x0);
    }
    phase_one(prob, &x0)
}

/// Minimize the total (elastic) constraint violation, plus a tiny proximal
/// term that keeps the subproblem strictly convex.
fn phase_one(prob: &Dense, x0: &[f64]) -> Result<Vec<f64>, SolveError> {
    let n = prob.n;
    let me = prob.eq.len();
    let mi = prob.ineq.len();
    let nt = n + 2 * me + mi;
    let eps = 1e-8;
    let mut q = vec![0.0; nt * nt];
    for i in 0..nt {
        q[i * nt + i] = eps;
    }
    let mut c = vec![1.0; nt];
    for i in 0..n {
        c[i] = -eps * x0[i];
    }
    let mut eq = Vec::with_capacity(me);
    let mut start = x0.to_vec();
    start.resize(nt, 0.0);
    for (r, row) in prob.eq.iter().enumerate() {
        let mut coef = row.coef.clone();
        coef.resize(nt, 0.0);
        coef[n + r] = 1.0;
        coef[n + me + r] = -1.0;
        let resid = row.rhs - row.dot(x0);
        start[n + r] = resid.max(0.0);
        start[n + me + r] = (-resid).max(0.0);
        eq.push(Row::new(coef, row.rhs));
    }
    let mut ineq = Vec::with_capacity(mi);
    for (r, row) in prob.ineq.iter().enumerate() {
        let mut coef = row.coef.clone();
        coef.resize(nt, 0.0);
        coef[n + 2 * me + r] = -1.0;
        start[n + 2 * me + r] = (row.dot(x0) - row.rhs).max(0.0);
        ineq.push(Row::new(coef, row.rhs));
    }
    let mut lb = prob.lb.clone();
    let mut ub = prob.ub.clone();
    lb.resize(nt, 0.0);
    ub.resize(nt, f64::INFINITY);
    let aug = Dense { n: nt, q, c, eq, ineq, lb, ub };
    let mut ws = ActiveSet::new(&aug, 0.0, start)?;
    ws.run(50 * (nt + mi + me) + 100)?;
    let x = ws.x;
    let violation: f64 = x[n..].iter().sum();
    let rhs_scale = prob
        .eq
        .iter()
        .chain(&prob.ineq)
        .fold(1.0_f64, |m, r| m.max(r.rhs.abs()));
    if violation > 1e-9 * rhs_scale {
        let mut violated = Vec::new();
        for r in 0..me {
            if x[n + r] + x[n + me + r] > 1e-9 * rhs_scale {
                violated.push(format!("equality {r}"));
            }
        }
        for r in 0..mi {
            if x[n + 2 * me + r] > 1e-9 * rhs_scale {
                violated.push(format!("inequality {r}"));
            }
        }
        return Err(SolveError::Infeasible { violation, violated });
    }
    Ok(x[..n].to_vec())
}

/// Solve a convex QP to global optimality.
pub fn solve_qp(p: &QpProblem) -> Result<Solution, SolveError> {
    p.validate()?;
    let prob = Dense::from_problem(p);
    let n = prob.n;
    let x0 = initial_point(&prob)?;
    let max_iter = 20 * (n + prob.ineq.len()) + 200;
    let pd = prob.positive_definite();
    let (ws, outcome) = if pd {
        let mut ws = ActiveSet::new(&prob, 0.0, x0)?;
        let outcome = ws.run(max_iter)?;
        (ws, outcome)
    } else {
        let rho = 1e-7 * prob.q_scale();
        let start_norm = norm_inf(&x0);
        let mut ws = ActiveSet::new(&prob, rho, x0)?;
        let mut outcome = Outcome::MaxIterations;
        for _ in 0..5000 {
            ws.anchor = ws.x.clone();
            if let Outcome::MaxIterations = ws.run(max_iter)? {
                outcome = Outcome::MaxIterations;
                break;
            }
            let moved = ws
                .x
                .iter()
                .zip(&ws.anchor)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let xn = norm_inf(&ws.x);
            if moved <= 1e-12 * (1.0 + xn) {
                outcome = Outcome::Converged;
                break;
            }
            if xn > 1e8 * (1.0 + start_norm + norm_inf(&prob.c)) {
                return Err(SolveError::Unbounded);
            }
        }
        (ws, outcome)
    };
    let status = match outcome {
        Outcome::Converged => SolveStatus::Optimal,
        Outcome::MaxIterations => SolveStatus::MaxIterations,
    };
    Ok(Solution {
        objective: prob.objective(&ws.x),
        kkt_residual: ws.kkt_residual(),
        iterations: ws.iterations,
        starts_used: 1,
        active: ws.active_list(),
        point: ws.x,
        status,
        quadratic_multiplier: None,
        certified_global: Some(status == SolveStatus::Optimal),
    })
}
