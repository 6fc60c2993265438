//! Linear price–demand models with market-consistency constraints.
//!
//! A model predicts hourly demand `R_h = α_h + Σ_l β[h][l] p_l`. The fit is a
//! weighted least-squares problem with forgetting-factor weights, subject to
//! nonpositive self-elasticities, nonnegative cross-elasticities and
//! nonpositive column sums of β. The column sums couple the per-hour
//! regressions, so all hours are solved together as one convex QP.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_qp, ActiveConstraint, QpProblem, SolveError, SolveStatus};
use crate::rng::stream_rng;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.98;

const CONSISTENCY_TOL: f64 = 1e-9;
const CONSISTENCY_PAIRS: usize = 1000;
const CONSISTENCY_SEED: u64 = 0x6d61726b6574;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("fit failed: {0}")]
    Solver(#[from] SolveError),
}

/// Prices and aggregate demands, one row per day, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub prices: Vec<Vec<f64>>,
    pub demands: Vec<Vec<f64>>,
    /// Age in days of each row (0 = newest). Empty means one row per day,
    /// oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ages: Vec<usize>,
}

impl FitHistory {
    pub fn new(prices: Vec<Vec<f64>>, demands: Vec<Vec<f64>>) -> Result<Self, DemandError> {
        let h = prices.first().map_or(0, Vec::len);
        if prices.is_empty() || h == 0 {
            return Err(DemandError::Invalid("empty fit history".into()));
        }
        if demands.len() != prices.len() {
            return Err(DemandError::Dimension(format!(
                "{} price days vs {} demand days",
                prices.len(),
                demands.len()
            )));
        }
        for (d, (p, y)) in prices.iter().zip(&demands).enumerate() {
            if p.len() != h || y.len() != h {
                return Err(DemandError::Dimension(format!("day {d} does not have {h} slots")));
            }
            if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(DemandError::Invalid(format!("day {d}: price {v} is not positive")));
            }
            if let Some(v) = y.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(DemandError::Invalid(format!("day {d}: demand {v} is negative")));
            }
        }
        Ok(Self { prices, demands, ages: Vec::new() })
    }

    /// Rows of several same-length histories observed on the same days, for
    /// example one per tariff, interleaved by day so each row keeps its age.
    pub fn pooled(parts: Vec<FitHistory>) -> Result<Self, DemandError> {
        let days = parts.first().map_or(0, FitHistory::days);
        if parts.iter().any(|p| p.days() != days || !p.ages.is_empty()) {
            return Err(DemandError::Dimension("pooled histories must cover the same days".into()));
        }
        let mut prices = Vec::with_capacity(days * parts.len());
        let mut demands = Vec::with_capacity(days * parts.len());
        let mut ages = Vec::with_capacity(days * parts.len());
        for d in 0..days {
            for p in &parts {
                prices.push(p.prices[d].clone());
                demands.push(p.demands[d].clone());
                ages.push(days - 1 - d);
            }
        }
        let mut out = Self::new(prices, demands)?;
        out.ages = ages;
        Ok(out)
    }

    fn age(&self, row: usize) -> usize {
        if self.ages.is_empty() { self.days() - 1 - row } else { self.ages[row] }
    }

    pub fn days(&self) -> usize {
        self.prices.len()
    }

    pub fn horizon(&self) -> usize {
        self.prices[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub weighted_rss: f64,
    pub r_squared: Vec<f64>,
    pub kkt_residual: f64,
    pub solver_iterations: usize,
    /// Constraints binding at the solution, e.g. `beta[3][3] <= 0`.
    pub active_constraints: Vec<String>,
    /// Kish effective sample size of the forgetting-factor weights.
    pub effective_observations: f64,
    /// Fewer than H+1 effective observations, or a numerically singular
    /// Gram matrix.
    pub rank_deficient: bool,
    /// A ridge term was added to the quadratic to make it definite.
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub group: String,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
    pub format_version: u32,
}

impl DemandModel {
    pub fn new(
        group: impl Into<String>,
        alpha: Vec<f64>,
        beta: Vec<Vec<f64>>,
        lambda: f64,
    ) -> Result<Self, DemandError> {
        let h = alpha.len();
        if h == 0 {
            return Err(DemandError::Invalid("empty horizon".into()));
        }
        if beta.len() != h || beta.iter().any(|r| r.len() != h) {
            return Err(DemandError::Dimension(format!("beta must be {h}×{h}")));
        }
        if !alpha.iter().chain(beta.iter().flatten()).all(|v| v.is_finite()) {
            return Err(DemandError::Invalid("non-finite coefficient".into()));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(DemandError::Invalid(format!("forgetting factor {lambda} outside (0, 1]")));
        }
        Ok(Self {
            group: group.into(),
            horizon: h,
            alpha,
            beta,
            lambda,
            diagnostics: None,
            format_version: FORMAT_VERSION,
        })
    }

    pub fn beta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizon, self.horizon, |h, l| self.beta[h][l])
    }

    pub fn alpha_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    /// Column sum `β[h][h] + Σ_{l≠h} β[l][h]` for each hour h.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.horizon).map(|h| (0..self.horizon).map(|l| self.beta[l][h]).sum()).collect()
    }

    /// Affine demand prediction; never clamped.
    pub fn predict(&self, prices: &[f64]) -> Result<Vec<f64>, DemandError> {
        if prices.len() != self.horizon {
            return Err(DemandError::Dimension(format!(
                "{} prices for horizon {}",
                prices.len(),
                self.horizon
            )));
        }
        Ok(self.predict_unchecked(prices))
    }

    pub(crate) fn predict_unchecked(&self, prices: &[f64]) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, row)| a + row.iter().zip(prices).map(|(b, p)| b * p).sum::<f64>())
            .collect()
    }
}

/// Same as [`DemandModel::predict`].
pub fn predict_demand(m: &DemandModel, prices: &[f64]) -> Result<Vec<f64>, DemandError> {
    m.predict(prices)
}

fn var(h: usize, k: usize, horizon: usize) -> usize {
    h * (horizon + 1) + k
}

/// Fit α and β by constrained weighted least squares with weights
/// `lambda^(D-d)`, newest day weighted 1.
pub fn fit_demand_model(
    group: impl Into<String>,
    hist: &FitHistory,
    lambda: f64,
) -> Result<DemandModel, DemandError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(DemandError::Invalid(format!("forgetting factor {lambda} outside (0, 1]")));
    }
    let hz = hist.horizon();
    let days = hist.days();
    let k = hz + 1;
    let n = hz * k;

    let weights: Vec<f64> = (0..days).map(|d| lambda.powi(hist.age(d) as i32)).collect();
    let wsum: f64 = weights.iter().sum();
    let wsq: f64 = weights.iter().map(|w| w * w).sum();
    let effective = wsum * wsum / wsq;

    // normalized Gram matrix and per-hour cross moments
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut moments = DMatrix::<f64>::zeros(k, hz);
    for d in 0..days {
        let w = weights[d] / wsum;
        let mut x = Vec::with_capacity(k);
        x.push(1.0);
        x.extend_from_slice(&hist.prices[d]);
        for i in 0..k {
            for j in 0..k {
                gram[(i, j)] += w * x[i] * x[j];
            }
            for h in 0..hz {
                moments[(i, h)] += w * x[i] * hist.demands[d][h];
            }
        }
    }

    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (emin, emax) = (eig.min(), eig.max());
    let singular = emin <= 1e-12 * emax;
    let rank_deficient = singular || effective < (hz + 1) as f64;
    if rank_deficient {
        log::warn!(
            "demand fit: {effective:.1} effective observations for {} unknowns per hour",
            hz + 1
        );
    }
    let ridge = if singular { 1e-8 * gram.diagonal().mean() } else { 0.0 };

    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for h in 0..hz {
        let o = var(h, 0, hz);
        for i in 0..k {
            for j in 0..k {
                q[(o + i, o + j)] = 2.0 * gram[(i, j)];
            }
            q[(o + i, o + i)] += 2.0 * ridge;
            c[o + i] = -2.0 * moments[(i, h)];
        }
    }
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for h in 0..hz {
        for l in 0..hz {
            let v = var(h, 1 + l, hz);
            if h == l {
                upper[v] = 0.0;
            } else {
                lower[v] = 0.0;
            }
        }
    }
    let mut cols = DMatrix::<f64>::zeros(hz, n);
    for h in 0..hz {
        for l in 0..hz {
            cols[(h, var(l, 1 + h, hz))] = 1.0;
        }
    }
    let problem = QpProblem::new(q, c)
        .with_inequalities(cols, DVector::zeros(hz))
        .with_bounds(lower, upper);
    let sol = solve_qp(&problem)?;
    if sol.status != SolveStatus::Optimal {
        return Err(DemandError::Solver(SolveError::Numerical(format!(
            "QP ended with status {:?} after {} iterations",
            sol.status, sol.iterations
        ))));
    }

    let mut alpha = vec![0.0; hz];
    let mut beta = vec![vec![0.0; hz]; hz];
    for h in 0..hz {
        alpha[h] = sol.point[var(h, 0, hz)];
        for l in 0..hz {
            beta[h][l] = sol.point[var(h, 1 + l, hz)];
        }
    }
    enforce_constraints(&mut beta);

    let mut model = DemandModel::new(group, alpha, beta, lambda)?;
    let mut rss = 0.0;
    let mut r_squared = Vec::with_capacity(hz);
    let fitted: Vec<Vec<f64>> = hist.prices.iter().map(|p| model.predict_unchecked(p)).collect();
    for h in 0..hz {
        let mean = (0..days).map(|d| weights[d] * hist.demands[d][h]).sum::<f64>() / wsum;
        let (mut res, mut tot) = (0.0, 0.0);
        for d in 0..days {
            res += weights[d] * (hist.demands[d][h] - fitted[d][h]).powi(2);
            tot += weights[d] * (hist.demands[d][h] - mean).powi(2);
        }
        rss += res;
        r_squared.push(if tot > 0.0 { 1.0 - res / tot } else if res == 0.0 { 1.0 } else { 0.0 });
    }
    let active_constraints = sol
        .active
        .iter()
        .map(|a| match *a {
            ActiveConstraint::Lower(i) | ActiveConstraint::Upper(i) => {
                let (h, l) = (i / k, i % k - 1);
                if h == l {
                    format!("beta[{h}][{l}] <= 0")
                } else {
                    format!("beta[{h}][{l}] >= 0")
                }
            }
            ActiveConstraint::Inequality(r) => format!("column {r} sum <= 0"),
        })
        .collect();
    model.diagnostics = Some(FitDiagnostics {
        weighted_rss: rss,
        r_squared,
        kkt_residual: sol.kkt_residual,
        solver_iterations: sol.iterations,
        active_constraints,
        effective_observations: effective,
        rank_deficient,
        regularized: ridge > 0.0,
    });
    Ok(model)
}

/// Remove solver-tolerance violations: clamp signs, then pull any positive
/// column sum back to zero through the diagonal.
fn enforce_constraints(beta: &mut [Vec<f64>]) {
    let hz = beta.len();
    for h in 0..hz {
        for l in 0..hz {
            beta[h][l] = if h == l { beta[h][l].min(0.0) } else { beta[h][l].max(0.0) };
        }
    }
    for h in 0..hz {
        let excess: f64 = (0..hz).map(|l| beta[l][h]).sum();
        if excess > 0.0 {
            beta[h][h] -= excess;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Hours with a positive self-elasticity.
    pub diagonal: Vec<usize>,
    /// `(h, l)` pairs with a negative cross-elasticity.
    pub off_diagonal: Vec<(usize, usize)>,
    /// Hours whose β column sum is positive, with the sum.
    pub column_sums: Vec<(usize, f64)>,
    pub pairs_checked: usize,
    /// Price pairs `P1 ≤ P2` with total demand rising.
    pub monotonicity_failures: usize,
    pub worst_monotonicity_gap: f64,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.diagonal.is_empty()
            && self.off_diagonal.is_empty()
            && self.column_sums.is_empty()
            && self.monotonicity_failures == 0
    }
}

/// Check the sign and column-sum constraints and test total-demand
/// monotonicity on random ordered price pairs.
pub fn check_market_consistency(m: &DemandModel) -> ConsistencyReport {
    let hz = m.horizon;
    let mut report = ConsistencyReport {
        diagonal: Vec::new(),
        off_diagonal: Vec::new(),
        column_sums: Vec::new(),
        pairs_checked: CONSISTENCY_PAIRS,
        monotonicity_failures: 0,
        worst_monotonicity_gap: 0.0,
    };
    for h in 0..hz {
        for l in 0..hz {
            let b = m.beta[h][l];
            if h == l && b > CONSISTENCY_TOL {
                report.diagonal.push(h);
            } else if h != l && b < -CONSISTENCY_TOL {
                report.off_diagonal.push((h, l));
            }
        }
    }
    for (h, s) in m.column_sums().into_iter().enumerate() {
        if s > CONSISTENCY_TOL {
            report.column_sums.push((h, s));
        }
    }
    let mut rng = stream_rng(CONSISTENCY_SEED, 0);
    for _ in 0..CONSISTENCY_PAIRS {
        let p1: Vec<f64> = (0..hz).map(|_| rng.random_range(0.5..30.0)).collect();
        let p2: Vec<f64> = p1
            .iter()
            .map(|p| if rng.random_bool(0.5) { p + rng.random_range(0.0..20.0) } else { *p })
            .collect();
        let t1: f64 = m.predict_unchecked(&p1).iter().sum();
        let t2: f64 = m.predict_unchecked(&p2).iter().sum();
        let gap = t2 - t1;
        if gap > CONSISTENCY_TOL {
            report.monotonicity_failures += 1;
        }
        report.worst_monotonicity_gap = report.worst_monotonicity_gap.max(gap);
    }
    report
}

/// Sum of models over the same horizon; the result describes the summed
/// demand of the groups.
pub fn aggregate_models(models: &[DemandModel]) -> Result<DemandModel, DemandError> {
    let first = models.first().ok_or_else(|| DemandError::Invalid("no models to aggregate".into()))?;
    let hz = first.horizon;
    if let Some(m) = models.iter().find(|m| m.horizon != hz) {
        return Err(DemandError::Dimension(format!(
            "horizon {} of group {} differs from {hz}",
            m.horizon, m.group
        )));
    }
    let mut alpha = vec![0.0; hz];
    let mut beta = vec![vec![0.0; hz]; hz];
    for m in models {
        for h in 0..hz {
            alpha[h] += m.alpha[h];
            for l in 0..hz {
                beta[h][l] += m.beta[h][l];
            }
        }
    }
    let group = models.iter().map(|m| m.group.as_str()).collect::<Vec<_>>().join("+");
    let lambda = models.iter().map(|m| m.lambda).fold(f64::NEG_INFINITY, f64::max);
    DemandModel::new(group, alpha, beta, lambda)
}
