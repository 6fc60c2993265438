//! Multi-start projected gradient ascent for
//!
//! ```text
//! maximize    ½ xᵀPx + qᵀx + k
//! subject to  E x = e,  l ≤ x ≤ u,
//!             ½ xᵀMx + mᵀx ≤ r        (optional)
//! ```
//!
//! `P` may be indefinite. The equalities are eliminated implicitly: every
//! iterate stays on the affine set and steps are projected onto the box
//! intersected with it, which is projected gradient ascent on the reduced
//! coordinates of an orthonormal null-space parameterization. The quadratic
//! inequality is handled by an augmented Lagrangian: the multiplier is
//! updated after each inner ascent and the penalty grows fourfold when the
//! violation stalls. A restoration phase and a Newton polish on the active
//! face follow.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use super::projection::Projector;
use super::{norm_inf, Solution, SolveError, SolveStatus};
use crate::rng::stream_rng;

/// `½ xᵀMx + mᵀx ≤ bound`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub bound: f64,
}

impl QuadraticConstraint {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x) - self.bound
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.quadratic * x + &self.linear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpProblem {
    /// Symmetric P of the maximized objective.
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub quadratic_constraint: Option<QuadraticConstraint>,
}

impl NlpProblem {
    pub fn new(quadratic: DMatrix<f64>, linear: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            quadratic,
            linear,
            constant: 0.0,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            lower,
            upper,
            quadratic_constraint: None,
        }
    }

    pub fn with_constant(mut self, k: f64) -> Self {
        self.constant = k;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_quadratic_constraint(mut self, c: QuadraticConstraint) -> Self {
        self.quadratic_constraint = Some(c);
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        self.objective_v(&xv)
    }

    fn objective_v(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x) + self.constant
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.quadratic * x + &self.linear
    }

    /// `(box, equality, quadratic)` violations at `x`, each relative to its scale.
    pub fn violations(&self, x: &[f64]) -> (f64, f64, f64) {
        let xv = DVector::from_column_slice(x);
        let mut vb = 0.0_f64;
        for i in 0..x.len() {
            vb = vb.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        let r = &self.eq_matrix * &xv - &self.eq_rhs;
        let ve = norm_inf(r.as_slice()) / norm_inf(self.eq_rhs.as_slice()).max(1.0);
        let vq = self
            .quadratic_constraint
            .as_ref()
            .map_or(0.0, |c| c.value(&xv).max(0.0));
        (vb.max(0.0), ve, vq)
    }

    pub(crate) fn validate(&self) -> Result<(), SolveError> {
        let n = self.dim();
        let bad = |s: &str| Err(SolveError::Dimension(s.to_string()));
        if self.quadratic.shape() != (n, n) {
            return bad("objective quadratic must be n×n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality constraints");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds");
        }
        if let Some(c) = &self.quadratic_constraint {
            if c.quadratic.shape() != (n, n) || c.linear.len() != n {
                return bad("quadratic constraint");
            }
        }
        for i in 0..n {
            if !(self.lower[i].is_finite() && self.upper[i].is_finite()) {
                return Err(SolveError::Invalid(format!("box for x[{i}] must be finite")));
            }
            if self.lower[i] > self.upper[i] {
                return Err(SolveError::Infeasible {
                    violation: self.lower[i] - self.upper[i],
                    violated: vec![format!("bounds of x[{i}]")],
                });
            }
        }
        Ok(())
    }
}

/// Tuning knobs for [`maximize_pricing`].
#[derive(Debug, Clone, PartialEq)]
pub struct AscentOptions {
    pub starts: usize,
    pub max_iterations: usize,
    /// Additional starting points, tried before the random ones.
    pub extra_starts: Vec<Vec<f64>>,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self { starts: 32, max_iterations: 5000, extra_starts: Vec::new() }
    }
}

/// Multi-start local maximization; deterministic given `seed`.
pub fn maximize_pricing(p: &NlpProblem, starts: usize, seed: u64) -> Result<Solution, SolveError> {
    maximize_pricing_with(p, &AscentOptions { starts, ..AscentOptions::default() }, seed)
}

pub fn maximize_pricing_with(
    p: &NlpProblem,
    opts: &AscentOptions,
    seed: u64,
) -> Result<Solution, SolveError> {
    p.validate()?;
    let n = p.dim();
    let lower: Vec<f64> = p.lower.iter().copied().collect();
    let upper: Vec<f64> = p.upper.iter().copied().collect();
    let projector = Projector::new(&p.eq_matrix, &p.eq_rhs, &lower, &upper)?;
    let ascent = Ascent::new(p, projector, opts.max_iterations);

    let mut seeds: Vec<Vec<f64>> = opts.extra_starts.clone();
    for s in 0..opts.starts {
        let mut rng = stream_rng(seed, s as u64);
        seeds.push((0..n).map(|i| rng.random_range(lower[i]..=upper[i])).collect());
    }
    if seeds.iter().any(|s| s.len() != n) {
        return Err(SolveError::Dimension("extra start length".into()));
    }
    let total = seeds.len();
    let results: Vec<Option<LocalResult>> = seeds
        .par_iter()
        .map(|y| {
            let x0 = ascent.projector.project(y).ok()?;
            ascent.run(DVector::from_vec(x0))
        })
        .collect();

    let iterations = results.iter().flatten().map(|r| r.iterations).sum();
    let best = results
        .into_iter()
        .flatten()
        .fold(None::<LocalResult>, |best, r| match best {
            Some(b) if b.objective >= r.objective => Some(b),
            _ => Some(r),
        })
        .ok_or(SolveError::NoFeasibleStart { starts: total })?;

    let certified = ascent.certified_global();
    let kkt = ascent.kkt_residual(&best.x, best.multiplier);
    Ok(Solution {
        point: best.x.iter().copied().collect(),
        objective: best.objective,
        status: if certified { SolveStatus::Optimal } else { SolveStatus::LocalOptimal },
        kkt_residual: kkt,
        iterations,
        starts_used: total,
        active: Vec::new(),
        quadratic_multiplier: p.quadratic_constraint.as_ref().map(|_| best.multiplier),
        certified_global: Some(certified),
    })
}

struct LocalResult {
    x: DVector<f64>,
    objective: f64,
    multiplier: f64,
    iterations: usize,
}

struct Ascent<'a> {
    p: &'a NlpProblem,
    projector: Projector,
    max_iter: usize,
    lipschitz: f64,
    cap_scale: f64,
}

const SUFFICIENT: f64 = 1e-4;
const MAX_OUTER: usize = 40;

#[derive(Debug, Clone, Copy)]
struct Penalty {
    y: f64,
    rho: f64,
}

impl<'a> Ascent<'a> {
    fn new(p: &'a NlpProblem, projector: Projector, max_iter: usize) -> Self {
        let lipschitz = p.quadratic.norm().max(1e-12);
        let cap_scale = p
            .quadratic_constraint
            .as_ref()
            .map_or(1.0, |c| c.bound.abs().max(1.0));
        Self { p, projector, max_iter, lipschitz, cap_scale }
    }

    fn project(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        self.projector.project(y.as_slice()).ok().map(DVector::from_vec)
    }

    fn cap(&self, x: &DVector<f64>) -> f64 {
        self.p.quadratic_constraint.as_ref().map_or(f64::NEG_INFINITY, |c| c.value(x))
    }

    /// Augmented Lagrangian `f − (max(0, y + ρc)² − y²) / 2ρ` of the cap.
    fn merit(&self, x: &DVector<f64>, pen: Option<Penalty>) -> f64 {
        let f = self.p.objective_v(x);
        match (&self.p.quadratic_constraint, pen) {
            (Some(c), Some(Penalty { y, rho })) => {
                let s = (y + rho * c.value(x)).max(0.0);
                f - (s * s - y * y) / (2.0 * rho)
            }
            _ => f,
        }
    }

    fn merit_gradient(&self, x: &DVector<f64>, pen: Option<Penalty>) -> DVector<f64> {
        let mut g = self.p.gradient(x);
        if let (Some(c), Some(Penalty { y, rho })) = (&self.p.quadratic_constraint, pen) {
            let s = (y + rho * c.value(x)).max(0.0);
            if s > 0.0 {
                g -= s * c.gradient(x);
            }
        }
        g
    }

    fn run(&self, x0: DVector<f64>) -> Option<LocalResult> {
        let mut iterations = 0;
        let mut x = x0;
        if let Some(c) = &self.p.quadratic_constraint {
            if c.value(&x) > 0.0 {
                x = self.restore(&x, &mut iterations)?;
            }
            let gf = norm_inf(self.p.gradient(&x).as_slice()).max(1.0);
            let gc = norm_inf(c.gradient(&x).as_slice()).max(1e-12);
            // a violation of 1% of the cap pulls as hard as the objective
            let mut pen = Penalty { y: 0.0, rho: gf / (gc * 1e-2 * self.cap_scale) };
            let mut last = f64::INFINITY;
            for _ in 0..MAX_OUTER {
                let prev = x.clone();
                x = self.ascend(x, Some(pen), &mut iterations);
                let v = c.value(&x);
                pen.y = (pen.y + pen.rho * v).max(0.0);
                let viol = v.max(0.0);
                let moved = norm_inf((&x - &prev).as_slice()) <= 1e-10 * (1.0 + norm_inf(x.as_slice()));
                if viol <= 1e-9 * self.cap_scale && moved {
                    break;
                }
                if viol > 0.25 * last {
                    pen.rho *= 4.0;
                }
                last = viol;
            }
            if c.value(&x) > 0.0 {
                x = self.restore(&x, &mut iterations)?;
            }
        } else {
            x = self.ascend(x, None, &mut iterations);
        }
        let (mut x, multiplier) = self.polish(x);
        if self.cap(&x) > 0.0 {
            x = self.restore(&x, &mut iterations)?;
        }
        if self.cap(&x) > 0.0 {
            return None;
        }
        Some(LocalResult { objective: self.p.objective_v(&x), x, multiplier, iterations })
    }

    /// Projected gradient ascent on the penalized merit with Armijo
    /// backtracking and Barzilai–Borwein trial steps.
    fn ascend(&self, mut x: DVector<f64>, pen: Option<Penalty>, iterations: &mut usize) -> DVector<f64> {
        let lip = self.lipschitz
            + match (&self.p.quadratic_constraint, pen) {
                (Some(c), Some(Penalty { y, rho })) => {
                    let s = (y + rho * c.value(&x)).max(0.0);
                    s * c.quadratic.norm() + rho * c.gradient(&x).norm_squared()
                }
                _ => 0.0,
            };
        let t_base = 1.0 / lip;
        let mut t = t_base;
        let mut phi = self.merit(&x, pen);
        let mut g = self.merit_gradient(&x, pen);
        for _ in 0..self.max_iter {
            *iterations += 1;
            let mut accepted = None;
            let mut trial = t;
            while trial >= 1e-14 * t_base {
                let Some(xn) = self.project(&(&x + trial * &g)) else { break };
                let step = &xn - &x;
                let phin = self.merit(&xn, pen);
                if phin >= phi + SUFFICIENT / trial * step.norm_squared() {
                    accepted = Some((xn, phin, step));
                    break;
                }
                trial *= 0.5;
            }
            let Some((xn, phin, step)) = accepted else { break };
            debug_assert!(phin >= phi - 1e-12 * phi.abs().max(1.0), "ascent decreased merit");
            let gn = self.merit_gradient(&xn, pen);
            let small = norm_inf(step.as_slice()) <= 1e-12 * (1.0 + norm_inf(xn.as_slice()));
            let y = &g - &gn;
            let sy = step.dot(&y);
            t = if sy > 0.0 { (step.norm_squared() / sy).clamp(1e-6 * t_base, 1e6 * t_base) } else { t_base };
            x = xn;
            phi = phin;
            g = gn;
            if small {
                break;
            }
        }
        x
    }

    /// Descend on the quadratic constraint until it holds, then bisect back
    /// towards the infeasible point so the result sits on the boundary.
    fn restore(&self, x_bad: &DVector<f64>, iterations: &mut usize) -> Option<DVector<f64>> {
        let c = self.p.quadratic_constraint.as_ref()?;
        let lip = c.quadratic.norm().max(1e-12);
        let mut x = x_bad.clone();
        let mut val = c.value(&x);
        let mut t = 1.0 / lip;
        for _ in 0..self.max_iter {
            if val <= 0.0 {
                break;
            }
            *iterations += 1;
            let g = c.gradient(&x);
            let mut trial = t;
            let mut moved = false;
            while trial >= 1e-14 / lip {
                let xn = self.project(&(&x - trial * &g))?;
                let vn = c.value(&xn);
                if vn <= val - SUFFICIENT / trial * (&xn - &x).norm_squared() && vn < val {
                    x = xn;
                    val = vn;
                    moved = true;
                    t = trial * 2.0;
                    break;
                }
                trial *= 0.5;
            }
            if !moved {
                return None;
            }
        }
        if val > 0.0 {
            return None;
        }
        // largest λ with c(x + λ (x_bad − x)) ≤ 0
        let dir = x_bad - &x;
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if c.value(&(&x + mid * &dir)) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(&x + lo * &dir)
    }

    /// Newton iteration on the KKT system of the face identified by the
    /// ascent (active bounds, equalities and, when near its boundary, the
    /// quadratic inequality). Accepted only when it stays feasible, nearby
    /// and does not lower the objective.
    fn polish(&self, x: DVector<f64>) -> (DVector<f64>, f64) {
        let p = self.p;
        let n = p.dim();
        let bound_tol = |i: usize| 1e-9 * (1.0 + p.upper[i].abs().max(p.lower[i].abs()));
        let free: Vec<usize> = (0..n)
            .filter(|&i| x[i] - p.lower[i] > bound_tol(i) && p.upper[i] - x[i] > bound_tol(i))
            .collect();
        let cap_active = p
            .quadratic_constraint
            .as_ref()
            .is_some_and(|c| c.value(&x) >= -1e-6 * self.cap_scale);
        let nf = free.len();
        let eq_rows: Vec<usize> = (0..p.eq_matrix.nrows())
            .filter(|&r| free.iter().any(|&i| p.eq_matrix[(r, i)] != 0.0))
            .collect();
        let me = eq_rows.len();
        let nc = usize::from(cap_active);
        if nf == 0 {
            return (x, 0.0);
        }
        let f0 = p.objective_v(&x);
        let mut xk = x.clone();
        let mut eta = DVector::zeros(me);
        let mut nu = 0.0;
        // multiplier estimate by least squares
        {
            let g = p.gradient(&xk);
            let cols = me + nc;
            if cols > 0 {
                let mut a = DMatrix::zeros(nf, cols);
                for (k, &i) in free.iter().enumerate() {
                    for (c, &r) in eq_rows.iter().enumerate() {
                        a[(k, c)] = p.eq_matrix[(r, i)];
                    }
                    if cap_active {
                        let gc = p.quadratic_constraint.as_ref().unwrap().gradient(&xk);
                        a[(k, me)] = gc[i];
                    }
                }
                let b = DVector::from_iterator(nf, free.iter().map(|&i| g[i]));
                if let Ok(sol) = a.svd(true, true).solve(&b, 1e-12) {
                    eta = sol.rows(0, me).into_owned();
                    if cap_active {
                        nu = sol[me];
                    }
                }
            }
        }
        let dim = nf + me + nc;
        let mut converged = false;
        for _ in 0..30 {
            let g = p.gradient(&xk);
            let (gc, mq) = match (&p.quadratic_constraint, cap_active) {
                (Some(c), true) => (c.gradient(&xk), Some(&c.quadratic)),
                _ => (DVector::zeros(n), None),
            };
            let mut jac = DMatrix::zeros(dim, dim);
            let mut res = DVector::zeros(dim);
            for (a, &i) in free.iter().enumerate() {
                let mut r = g[i] - nu * gc[i];
                for (c, &row) in eq_rows.iter().enumerate() {
                    r -= eta[c] * p.eq_matrix[(row, i)];
                    jac[(a, nf + c)] = -p.eq_matrix[(row, i)];
                    jac[(nf + c, a)] = p.eq_matrix[(row, i)];
                }
                res[a] = r;
                for (b, &j) in free.iter().enumerate() {
                    jac[(a, b)] = p.quadratic[(i, j)] - mq.map_or(0.0, |m| nu * m[(i, j)]);
                }
                if cap_active {
                    jac[(a, nf + me)] = -gc[i];
                    jac[(nf + me, a)] = gc[i];
                }
            }
            for (c, &row) in eq_rows.iter().enumerate() {
                let ax: f64 = (0..n).map(|i| p.eq_matrix[(row, i)] * xk[i]).sum();
                res[nf + c] = ax - p.eq_rhs[row];
            }
            if cap_active {
                res[nf + me] = self.cap(&xk);
            }
            let scale = norm_inf(g.as_slice()).max(1.0);
            if norm_inf(res.as_slice()) <= 1e-13 * scale {
                converged = true;
                break;
            }
            let Some(delta) = jac.lu().solve(&(-res)) else { break };
            for (a, &i) in free.iter().enumerate() {
                xk[i] += delta[a];
            }
            for c in 0..me {
                eta[c] += delta[nf + c];
            }
            if cap_active {
                nu += delta[nf + me];
            }
        }
        if !converged {
            return (x, 0.0);
        }
        let width = (0..n).map(|i| p.upper[i] - p.lower[i]).fold(0.0_f64, f64::max);
        let near = norm_inf((&xk - &x).as_slice()) <= 0.25 * width.max(1e-12);
        let inside = (0..n).all(|i| xk[i] >= p.lower[i] - 1e-12 && xk[i] <= p.upper[i] + 1e-12);
        let better = p.objective_v(&xk) >= f0 - 1e-12 * f0.abs().max(1.0);
        let cap_ok = self.cap(&xk) <= 1e-9 * self.cap_scale && nu >= -1e-9;
        if near && inside && better && cap_ok {
            for i in 0..n {
                xk[i] = xk[i].clamp(p.lower[i], p.upper[i]);
            }
            (xk, nu.max(0.0))
        } else {
            (x, 0.0)
        }
    }

    /// Reduced-space concavity probe: the local optimum is global when the
    /// objective is concave on the null space of the equalities and the
    /// quadratic constraint (if any) is convex there.
    fn certified_global(&self) -> bool {
        let p = self.p;
        let n = p.dim();
        let basis = null_space(&p.eq_matrix, n);
        if basis.ncols() == 0 {
            return true;
        }
        let reduced = basis.transpose() * &p.quadratic * &basis;
        let scale = p.quadratic.amax().max(1e-300);
        let concave = SymmetricEigen::new(reduced).eigenvalues.max() <= 1e-10 * scale;
        let convex_cap = p.quadratic_constraint.as_ref().is_none_or(|c| {
            let m = basis.transpose() * &c.quadratic * &basis;
            SymmetricEigen::new(m).eigenvalues.min() >= -1e-10 * c.quadratic.amax().max(1e-300)
        });
        concave && convex_cap
    }

    /// `‖x − Π(x + t∇L)‖∞ / t` relative to the gradient scale.
    fn kkt_residual(&self, x: &DVector<f64>, nu: f64) -> f64 {
        let mut g = self.p.gradient(x);
        if let Some(c) = &self.p.quadratic_constraint {
            g -= nu * c.gradient(x);
        }
        let t = 1.0 / self.lipschitz.max(1.0);
        let Some(xp) = self.project(&(x + t * &g)) else { return f64::INFINITY };
        let scale = norm_inf(self.p.gradient(x).as_slice()).max(1.0);
        norm_inf((&xp - x).as_slice()) / t / scale
    }
}

/// Orthonormal basis of `{z : A z = 0}`.
pub(crate) fn null_space(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // eigenvectors of AᵀA with (numerically) zero eigenvalue
    let ata = a.transpose() * a;
    let eig = SymmetricEigen::new(ata);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= 1e-10 * scale).collect();
    DMatrix::from_fn(n, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])])
}
