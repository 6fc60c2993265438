//! Euclidean projection onto `{x : E x = e, l ≤ x ≤ u}`.
//!
//! When every equality row is a (scaled) sum over its own block of variables,
//! which is the shape of per-group average-price constraints, the projection
//! separates per block and is computed exactly from the breakpoints of the
//! piecewise-linear map `τ ↦ Σ clamp(yᵢ − τ, lᵢ, uᵢ)`. Any other equality
//! structure falls back to the active-set QP.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpProblem};
use super::SolveError;

#[derive(Debug, Clone)]
pub(crate) enum Projector {
    Blocks {
        blocks: Vec<(Vec<usize>, f64)>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    General {
        eq: DMatrix<f64>,
        rhs: DVector<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

impl Projector {
    pub fn new(
        eq: &DMatrix<f64>,
        rhs: &DVector<f64>,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self, SolveError> {
        let n = lower.len();
        if let Some(blocks) = sum_blocks(eq, rhs) {
            for (idx, target) in &blocks {
                let lo: f64 = idx.iter().map(|&i| lower[i]).sum();
                let hi: f64 = idx.iter().map(|&i| upper[i]).sum();
                let tol = 1e-12 * target.abs().max(1.0);
                if *target < lo - tol || *target > hi + tol {
                    return Err(SolveError::Infeasible {
                        violation: (lo - target).max(target - hi),
                        violated: vec![format!("sum over {idx:?} = {target}")],
                    });
                }
            }
            return Ok(Self::Blocks { blocks, lower: lower.to_vec(), upper: upper.to_vec() });
        }
        debug_assert_eq!(eq.ncols(), n);
        Ok(Self::General {
            eq: eq.clone(),
            rhs: rhs.clone(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        })
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>, SolveError> {
        match self {
            Self::Blocks { blocks, lower, upper } => {
                let mut x: Vec<f64> =
                    y.iter().enumerate().map(|(i, v)| v.clamp(lower[i], upper[i])).collect();
                for (idx, target) in blocks {
                    let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                    let lb: Vec<f64> = idx.iter().map(|&i| lower[i]).collect();
                    let ub: Vec<f64> = idx.iter().map(|&i| upper[i]).collect();
                    let xb = project_capped_sum(&yb, &lb, &ub, *target);
                    for (k, &i) in idx.iter().enumerate() {
                        x[i] = xb[k];
                    }
                }
                Ok(x)
            }
            Self::General { eq, rhs, lower, upper } => {
                let n = y.len();
                let p = QpProblem::new(DMatrix::identity(n, n), -DVector::from_column_slice(y))
                    .with_equalities(eq.clone(), rhs.clone())
                    .with_bounds(DVector::from_column_slice(lower), DVector::from_column_slice(upper));
                Ok(solve_qp(&p)?.point)
            }
        }
    }
}

/// Recognize rows of the form `a Σ_{i∈S} xᵢ = b` with disjoint supports.
fn sum_blocks(eq: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<Vec<(Vec<usize>, f64)>> {
    let mut used = vec![false; eq.ncols()];
    let mut blocks = Vec::with_capacity(eq.nrows());
    for r in 0..eq.nrows() {
        let idx: Vec<usize> = (0..eq.ncols()).filter(|&c| eq[(r, c)] != 0.0).collect();
        let a = *idx.first().map(|&c| &eq[(r, c)])?;
        if idx.iter().any(|&c| eq[(r, c)] != a || used[c]) {
            return None;
        }
        for &c in &idx {
            used[c] = true;
        }
        blocks.push((idx, rhs[r] / a));
    }
    Some(blocks)
}

/// Exact projection of `y` onto `{x : Σx = s, l ≤ x ≤ u}` (assumed nonempty).
pub(crate) fn project_capped_sum(y: &[f64], l: &[f64], u: &[f64], s: f64) -> Vec<f64> {
    let eval = |t: f64| -> f64 { (0..y.len()).map(|i| (y[i] - t).clamp(l[i], u[i])).sum() };
    let mut bps: Vec<f64> = (0..y.len()).flat_map(|i| [y[i] - u[i], y[i] - l[i]]).collect();
    bps.sort_by(|a, b| a.total_cmp(b));
    bps.dedup();
    // eval is nonincreasing in τ: Σu at the first breakpoint, Σl at the last
    let tau = if eval(bps[0]) <= s {
        bps[0]
    } else if eval(*bps.last().unwrap()) >= s {
        *bps.last().unwrap()
    } else {
        let (mut lo, mut hi) = (0usize, bps.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if eval(bps[mid]) >= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (t0, t1) = (bps[lo], bps[hi]);
        let (f0, f1) = (eval(t0), eval(t1));
        if f0 == f1 {
            t0
        } else {
            t0 + (f0 - s) * (t1 - t0) / (f0 - f1)
        }
    };
    let mut x: Vec<f64> = (0..y.len()).map(|i| (y[i] - tau).clamp(l[i], u[i])).collect();
    // push the rounding residue onto interior coordinates
    let resid = s - x.iter().sum::<f64>();
    if resid != 0.0 {
        let interior: Vec<usize> =
            (0..x.len()).filter(|&i| x[i] + resid > l[i] && x[i] + resid < u[i]).collect();
        if let Some(&i) = interior.first() {
            x[i] += resid;
        }
    }
    x
}
