//! Exhaustive grid scan over the reduced coordinates of a small
//! [`NlpProblem`]. Slow by design; it checks [`super::maximize_pricing`].

use nalgebra::DVector;
use rayon::prelude::*;

use super::nlp::NlpProblem;
use super::{Solution, SolveError, SolveStatus};

const MAX_POINTS: u128 = 200_000_000;

/// Scan the feasible grid with spacing `resolution` on the non-pivot
/// coordinates of the equality system (pivot coordinates are solved for).
pub fn grid_oracle(p: &NlpProblem, resolution: f64) -> Result<Solution, SolveError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(SolveError::Invalid(format!("grid resolution must be positive, got {resolution}")));
    }
    p.validate()?;
    let n = p.dim();
    let elim = Elimination::new(p);
    let free = &elim.free;
    if free.len() > 4 {
        return Err(SolveError::GridDimension(free.len()));
    }
    let axes: Vec<Vec<f64>> = free
        .iter()
        .map(|&i| {
            let (lo, hi) = (p.lower[i], p.upper[i]);
            let steps = ((hi - lo) / resolution + 1e-9).floor() as usize;
            let mut v: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * resolution).collect();
            if hi - v[v.len() - 1] > 1e-9 * resolution {
                v.push(hi);
            }
            v
        })
        .collect();
    let count: u128 = axes.iter().map(|a| a.len() as u128).product();
    if count > MAX_POINTS {
        return Err(SolveError::GridTooLarge(count));
    }

    let first_len = axes.first().map_or(1, Vec::len);
    let best = (0..first_len)
        .into_par_iter()
        .map(|i0| {
            let mut best: Option<(f64, Vec<f64>)> = None;
            let mut idx = vec![0usize; axes.len()];
            if !axes.is_empty() {
                idx[0] = i0;
            }
            loop {
                let z: Vec<f64> = idx.iter().zip(&axes).map(|(&k, a)| a[k]).collect();
                if let Some(x) = elim.complete(p, &z) {
                    let f = p.objective(&x);
                    if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                        best = Some((f, x));
                    }
                }
                // odometer over the remaining axes
                let mut d = axes.len();
                loop {
                    if d <= 1 {
                        return best;
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < axes[d].len() {
                        break;
                    }
                    idx[d] = 0;
                }
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .fold(None::<(f64, Vec<f64>)>, |acc, c| match acc {
            Some(a) if a.0 >= c.0 => Some(a),
            _ => Some(c),
        });

    Ok(match best {
        Some((objective, point)) => Solution {
            point,
            objective,
            status: SolveStatus::Optimal,
            kkt_residual: f64::NAN,
            iterations: count as usize,
            starts_used: 0,
            active: Vec::new(),
            quadratic_multiplier: None,
            certified_global: Some(true),
        },
        None => Solution {
            point: vec![f64::NAN; n],
            objective: f64::NEG_INFINITY,
            status: SolveStatus::Infeasible,
            kkt_residual: f64::NAN,
            iterations: count as usize,
            starts_used: 0,
            active: Vec::new(),
            quadratic_multiplier: None,
            certified_global: None,
        },
    })
}

/// Reduced row-echelon form of the equality system: `x_pivot = rhs − R x_free`.
struct Elimination {
    pivots: Vec<usize>,
    free: Vec<usize>,
    // one row per pivot: coefficients on free columns, then rhs
    rows: Vec<(Vec<f64>, f64)>,
}

impl Elimination {
    fn new(p: &NlpProblem) -> Self {
        let n = p.dim();
        let m = p.eq_matrix.nrows();
        let mut a: Vec<Vec<f64>> = (0..m)
            .map(|r| {
                let mut row: Vec<f64> = (0..n).map(|c| p.eq_matrix[(r, c)]).collect();
                row.push(p.eq_rhs[r]);
                row
            })
            .collect();
        let scale = p.eq_matrix.amax().max(1e-300);
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..n {
            if r == m {
                break;
            }
            let (best, val) = (r..m)
                .map(|i| (i, a[i][c].abs()))
                .fold((r, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if val <= 1e-12 * scale {
                continue;
            }
            a.swap(r, best);
            let piv = a[r][c];
            for v in a[r].iter_mut() {
                *v /= piv;
            }
            for i in 0..m {
                if i != r && a[i][c] != 0.0 {
                    let f = a[i][c];
                    let (src, dst) = if i < r {
                        let (lo, hi) = a.split_at_mut(r);
                        (&hi[0], &mut lo[i])
                    } else {
                        let (lo, hi) = a.split_at_mut(i);
                        (&lo[r], &mut hi[0])
                    };
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d -= f * s;
                    }
                }
            }
            pivots.push(c);
            r += 1;
        }
        let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        let rows = (0..pivots.len())
            .map(|k| (free.iter().map(|&c| a[k][c]).collect(), a[k][n]))
            .collect();
        Self { pivots, free, rows }
    }

    /// Full point from free coordinates, or `None` if infeasible.
    fn complete(&self, p: &NlpProblem, z: &[f64]) -> Option<Vec<f64>> {
        let n = p.dim();
        let mut x = vec![0.0; n];
        for (k, &c) in self.free.iter().enumerate() {
            x[c] = z[k];
        }
        for (k, &c) in self.pivots.iter().enumerate() {
            let (coef, rhs) = &self.rows[k];
            let v = rhs - coef.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            let tol = 1e-9 * (1.0 + v.abs());
            if v < p.lower[c] - tol || v > p.upper[c] + tol {
                return None;
            }
            x[c] = v.clamp(p.lower[c], p.upper[c]);
        }
        if let Some(q) = &p.quadratic_constraint {
            if q.value(&DVector::from_column_slice(&x)) > 0.0 {
                return None;
            }
        }
        Some(x)
    }
}
