//! Retail profit maximization over per-group hourly prices.
//!
//! For group g with model `R = α + βp` and cost c, profit
//! `(p − c)ᵀ(α + βp)` is the quadratic `½pᵀ(β + βᵀ)p + (α − βᵀc)ᵀp − cᵀα`,
//! and revenue `pᵀ(α + βp)` is `½pᵀ(β + βᵀ)p + αᵀp`. Prices are bounded per
//! group and hour, each group's mean price may be pinned to a flat price, and
//! total revenue across groups may be capped.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{aggregate_models, DemandError, DemandModel};
use crate::optim::{
    maximize_pricing_with, AscentOptions, NlpProblem, QuadraticConstraint, Solution, SolveError, SolveStatus,
};
use crate::synthgen::{generate_costs, SynthError};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_P_MAX: f64 = 25.0;
pub const DEFAULT_STARTS: usize = 32;

/// Revenue caps are enforced against a bound tightened by this relative
/// amount, so that the reported revenue stays under the cap after rounding.
const CAP_MARGIN: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("{0}")]
    Invalid(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl From<SolveError> for PricingError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Infeasible { .. } | SolveError::NoFeasibleStart { .. } => PricingError::Infeasible(e.to_string()),
            other => PricingError::Solver(other.to_string()),
        }
    }
}

/// Bounds and side constraints shared by every group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingConfig {
    /// Scalar price floor; when absent the floor is the hourly cost.
    #[serde(default)]
    pub p_min: Option<f64>,
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default)]
    pub flat_price: Option<f64>,
    #[serde(default)]
    pub revenue_cap: Option<f64>,
    #[serde(default = "default_starts")]
    pub starts: usize,
}

fn default_p_max() -> f64 {
    DEFAULT_P_MAX
}

fn default_starts() -> usize {
    DEFAULT_STARTS
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self { p_min: None, p_max: DEFAULT_P_MAX, flat_price: Some(10.0), revenue_cap: None, starts: DEFAULT_STARTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingProblem {
    pub models: Vec<DemandModel>,
    pub cost: Vec<f64>,
    pub p_min: Vec<Vec<f64>>,
    pub p_max: Vec<Vec<f64>>,
    pub revenue_cap: Option<f64>,
    pub flat_price: Option<f64>,
    pub starts: usize,
}

impl PricingProblem {
    pub fn groups(&self) -> usize {
        self.models.len()
    }

    pub fn horizon(&self) -> usize {
        self.cost.len()
    }

    /// Validate dimensions, bound order and flat-price reachability.
    pub fn new(
        models: Vec<DemandModel>,
        cost: Vec<f64>,
        p_min: Vec<Vec<f64>>,
        p_max: Vec<Vec<f64>>,
        revenue_cap: Option<f64>,
        flat_price: Option<f64>,
        starts: usize,
    ) -> Result<Self, PricingError> {
        let g = models.len();
        let hz = cost.len();
        if g == 0 || hz == 0 {
            return Err(PricingError::Invalid("need at least one group and one hour".into()));
        }
        if let Some(m) = models.iter().find(|m| m.horizon != hz) {
            return Err(PricingError::Invalid(format!(
                "model {} has horizon {} but cost has {hz} hours",
                m.group, m.horizon
            )));
        }
        if cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(PricingError::Invalid("costs must be finite and nonnegative".into()));
        }
        let shape_ok = |b: &Vec<Vec<f64>>| b.len() == g && b.iter().all(|r| r.len() == hz && r.iter().all(|v| v.is_finite()));
        if !shape_ok(&p_min) || !shape_ok(&p_max) {
            return Err(PricingError::Invalid(format!("price bounds must be finite {g}×{hz} matrices")));
        }
        for gi in 0..g {
            for h in 0..hz {
                if p_min[gi][h] > p_max[gi][h] {
                    return Err(PricingError::Infeasible(format!(
                        "group {gi} hour {h}: minimum price {} exceeds maximum {}",
                        p_min[gi][h], p_max[gi][h]
                    )));
                }
            }
            if let Some(fp) = flat_price {
                let lo = p_min[gi].iter().sum::<f64>() / hz as f64;
                let hi = p_max[gi].iter().sum::<f64>() / hz as f64;
                if !(fp >= lo - 1e-12 && fp <= hi + 1e-12) {
                    return Err(PricingError::Infeasible(format!(
                        "flat price {fp} outside the reachable mean range [{lo}, {hi}] of group {gi}"
                    )));
                }
            }
        }
        if let Some(cap) = revenue_cap {
            if !cap.is_finite() {
                return Err(PricingError::Invalid("revenue cap must be finite".into()));
            }
        }
        if starts == 0 {
            return Err(PricingError::Invalid("at least one start is required".into()));
        }
        Ok(Self { models, cost, p_min, p_max, revenue_cap, flat_price, starts })
    }

    /// Each group's objective and revenue pieces.
    fn group_terms(&self, g: usize) -> (DMatrix<f64>, DVector<f64>, f64, DVector<f64>) {
        let m = &self.models[g];
        let beta = m.beta_matrix();
        let alpha = m.alpha_vector();
        let c = DVector::from_column_slice(&self.cost);
        let sym = &beta + beta.transpose();
        let lin = &alpha - beta.transpose() * &c;
        let constant = -c.dot(&alpha);
        (sym, lin, constant, alpha)
    }

    /// Joint problem over the listed groups, variables ordered group-major.
    fn nlp(&self, groups: &[usize], with_cap: bool) -> NlpProblem {
        let hz = self.horizon();
        let n = groups.len() * hz;
        let mut p = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        let mut k = 0.0;
        let mut mcap = DMatrix::zeros(n, n);
        let mut mlin = DVector::zeros(n);
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        for (b, &g) in groups.iter().enumerate() {
            let (sym, lin, constant, alpha) = self.group_terms(g);
            let o = b * hz;
            p.view_mut((o, o), (hz, hz)).copy_from(&sym);
            mcap.view_mut((o, o), (hz, hz)).copy_from(&sym);
            q.rows_mut(o, hz).copy_from(&lin);
            mlin.rows_mut(o, hz).copy_from(&alpha);
            k += constant;
            for h in 0..hz {
                lower[o + h] = self.p_min[g][h];
                upper[o + h] = self.p_max[g][h];
            }
        }
        let mut prob = NlpProblem::new(p, q, lower, upper).with_constant(k);
        if let Some(fp) = self.flat_price {
            let mut e = DMatrix::zeros(groups.len(), n);
            for b in 0..groups.len() {
                for h in 0..hz {
                    e[(b, b * hz + h)] = 1.0 / hz as f64;
                }
            }
            prob = prob.with_equalities(e, DVector::from_element(groups.len(), fp));
        }
        if let (Some(cap), true) = (self.revenue_cap, with_cap) {
            prob = prob.with_quadratic_constraint(QuadraticConstraint {
                quadratic: mcap,
                linear: mlin,
                bound: cap - CAP_MARGIN * cap.abs().max(1.0),
            });
        }
        prob
    }

    /// Problem of the single price vector charged to every group.
    pub fn uniform(&self) -> Result<PricingProblem, PricingError> {
        let hz = self.horizon();
        let lo: Vec<f64> = (0..hz).map(|h| self.p_min.iter().map(|r| r[h]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let hi: Vec<f64> = (0..hz).map(|h| self.p_max.iter().map(|r| r[h]).fold(f64::INFINITY, f64::min)).collect();
        PricingProblem::new(
            vec![aggregate_models(&self.models)?],
            self.cost.clone(),
            vec![lo],
            vec![hi],
            self.revenue_cap,
            self.flat_price,
            self.starts,
        )
    }
}

/// Assemble a problem from shared bounds: the floor is the hourly cost unless
/// the config gives a scalar floor.
pub fn build_problem(models: Vec<DemandModel>, cost: Vec<f64>, config: &PricingConfig) -> Result<PricingProblem, PricingError> {
    let g = models.len();
    let floor = match config.p_min {
        Some(v) => vec![v; cost.len()],
        None => cost.clone(),
    };
    let p_max = vec![vec![config.p_max; cost.len()]; g];
    PricingProblem::new(models, cost, vec![floor; g], p_max, config.revenue_cap, config.flat_price, config.starts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Multiple,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingSolution {
    pub variant: Variant,
    pub groups: Vec<String>,
    pub prices: Vec<Vec<f64>>,
    pub per_group_demand: Vec<Vec<f64>>,
    pub profit: f64,
    pub revenue: f64,
    pub status: SolveStatus,
    pub certified_global: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub starts_used: usize,
    /// Objective value reported by the solver, before re-evaluation.
    pub solver_objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revenue_cap_multiplier: Option<f64>,
    /// `(group, hour)` cells where predicted demand is negative.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_demand: Vec<(usize, usize)>,
    pub format_version: u32,
}

impl PricingSolution {
    pub fn write_plot_csv<W: Write>(&self, cost: &[f64], w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["hour", "group", "price_cents", "demand_kwh", "cost_cents"])?;
        for (g, name) in self.groups.iter().enumerate() {
            for (h, c) in cost.iter().enumerate() {
                wr.write_record([
                    h.to_string(),
                    name.clone(),
                    self.prices[g][h].to_string(),
                    self.per_group_demand[g][h].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// `Σ_g Σ_h (p[g][h] − c[h]) R_h^g(p[g])`.
pub fn evaluate_profit(prices: &[Vec<f64>], models: &[DemandModel], cost: &[f64]) -> Result<f64, PricingError> {
    if prices.len() != models.len() {
        return Err(PricingError::Invalid(format!("{} price rows for {} groups", prices.len(), models.len())));
    }
    let mut total = 0.0;
    for (p, m) in prices.iter().zip(models) {
        if p.len() != cost.len() {
            return Err(PricingError::Invalid("price row and cost lengths differ".into()));
        }
        let r = m.predict(p)?;
        total += p.iter().zip(cost).zip(&r).map(|((p, c), r)| (p - c) * r).sum::<f64>();
    }
    Ok(total)
}

pub fn evaluate_revenue(prices: &[Vec<f64>], models: &[DemandModel]) -> Result<f64, PricingError> {
    let mut total = 0.0;
    for (p, m) in prices.iter().zip(models) {
        total += p.iter().zip(m.predict(p)?).map(|(p, r)| p * r).sum::<f64>();
    }
    Ok(total)
}

fn group_seed(seed: u64, g: usize) -> u64 {
    seed ^ (g as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn assemble(
    p: &PricingProblem,
    variant: Variant,
    prices: Vec<Vec<f64>>,
    parts: &[Solution],
) -> Result<PricingSolution, PricingError> {
    let per_group_demand: Vec<Vec<f64>> =
        p.models.iter().zip(&prices).map(|(m, row)| m.predict_unchecked(row)).collect();
    let negative_demand: Vec<(usize, usize)> = per_group_demand
        .iter()
        .enumerate()
        .flat_map(|(g, r)| r.iter().enumerate().filter(|(_, v)| **v < 0.0).map(move |(h, _)| (g, h)))
        .collect();
    if !negative_demand.is_empty() {
        log::warn!("negative predicted demand at {negative_demand:?}");
    }
    let profit = evaluate_profit(&prices, &p.models, &p.cost)?;
    let revenue = evaluate_revenue(&prices, &p.models)?;
    let status = if parts.iter().all(|s| s.status == SolveStatus::Optimal) {
        SolveStatus::Optimal
    } else {
        SolveStatus::LocalOptimal
    };
    let sol = PricingSolution {
        variant,
        groups: p.models.iter().map(|m| m.group.clone()).collect(),
        prices,
        per_group_demand,
        profit,
        revenue,
        status,
        certified_global: parts.iter().all(|s| s.certified_global == Some(true)),
        kkt_residual: parts.iter().map(|s| s.kkt_residual).fold(0.0, f64::max),
        iterations: parts.iter().map(|s| s.iterations).sum(),
        starts_used: parts.iter().map(|s| s.starts_used).sum(),
        solver_objective: parts.iter().map(|s| s.objective).sum(),
        revenue_cap_multiplier: parts.iter().find_map(|s| s.quadratic_multiplier),
        negative_demand,
        format_version: FORMAT_VERSION,
    };
    check_feasible(p, &sol)?;
    Ok(sol)
}

/// Bounds, flat-price mean (1e-8) and revenue cap (1e-6).
pub fn check_feasible(p: &PricingProblem, sol: &PricingSolution) -> Result<(), PricingError> {
    let hz = p.horizon();
    for (g, row) in sol.prices.iter().enumerate() {
        for h in 0..hz {
            if row[h] < p.p_min[g][h] || row[h] > p.p_max[g][h] {
                return Err(PricingError::Solver(format!("price {} at ({g}, {h}) outside bounds", row[h])));
            }
        }
        if let Some(fp) = p.flat_price {
            let mean = row.iter().sum::<f64>() / hz as f64;
            if (mean - fp).abs() > 1e-8 {
                return Err(PricingError::Solver(format!("group {g} mean price {mean} differs from {fp}")));
            }
        }
    }
    if let Some(cap) = p.revenue_cap {
        if sol.revenue > cap + 1e-6 {
            return Err(PricingError::Solver(format!("revenue {} exceeds cap {cap}", sol.revenue)));
        }
    }
    Ok(())
}

fn solve_joint(
    p: &PricingProblem,
    groups: &[usize],
    extra: Option<&[f64]>,
    seed: u64,
) -> Result<Solution, PricingError> {
    let nlp = p.nlp(groups, true);
    let mut opts = AscentOptions { starts: p.starts, ..AscentOptions::default() };
    if let Some(x) = extra {
        opts.extra_starts.push(groups.iter().flat_map(|_| x.iter().copied()).collect());
    }
    Ok(maximize_pricing_with(&nlp, &opts, seed)?)
}

/// One price vector per group. The uniform optimum seeds every search, so
/// the result is never worse than uniform pricing when the bounds are
/// shared by all groups.
pub fn solve_multiple(p: &PricingProblem, seed: u64) -> Result<PricingSolution, PricingError> {
    if p.groups() == 1 {
        let mut s = solve_uniform(p, seed)?;
        s.variant = Variant::Multiple;
        return Ok(s);
    }
    let uniform = solve_uniform(p, seed)?;
    let start = &uniform.prices[0];
    let hz = p.horizon();
    let g = p.groups();
    if p.revenue_cap.is_some() {
        let all: Vec<usize> = (0..g).collect();
        let sol = solve_joint(p, &all, Some(start), seed)?;
        let prices = sol.point.chunks(hz).map(<[f64]>::to_vec).collect();
        return assemble(p, Variant::Multiple, prices, &[sol]);
    }
    let parts: Vec<Solution> = (0..g)
        .into_par_iter()
        .map(|gi| solve_joint(p, &[gi], Some(start), group_seed(seed, gi)))
        .collect::<Result<_, _>>()?;
    let prices = parts.iter().map(|s| s.point.clone()).collect();
    assemble(p, Variant::Multiple, prices, &parts)
}

/// A single price vector for all groups, optimized against the summed
/// model within the intersection of the group bounds.
pub fn solve_uniform(p: &PricingProblem, seed: u64) -> Result<PricingSolution, PricingError> {
    let agg = p.uniform()?;
    let sol = solve_joint(&agg, &[0], None, seed)?;
    let prices = vec![sol.point.clone(); p.groups()];
    let mut out = assemble(p, Variant::Uniform, prices, std::slice::from_ref(&sol))?;
    out.solver_objective = sol.objective;
    Ok(out)
}

/// Per-run wholesale cost draws around a base shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGenerator {
    pub base_shape: Vec<f64>,
    pub noise_sd: f64,
}

impl CostGenerator {
    pub fn draw(&self, seed: u64, run: usize) -> Result<Vec<f64>, PricingError> {
        let day = generate_costs(1, &self.base_shape, self.noise_sd, group_seed(seed, run))?;
        Ok(day.into_iter().next().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub run: usize,
    pub cost: Vec<f64>,
    pub multiple_profit: f64,
    pub uniform_profit: f64,
    /// `(multiple − uniform) / |uniform|`.
    pub relative_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub config: PricingConfig,
    pub seed: u64,
    pub runs: Vec<BenchmarkRun>,
    pub mean_relative_improvement: f64,
    pub format_version: u32,
}

/// Solve both variants on `runs` cost draws.
pub fn benchmark(
    models: &[DemandModel],
    config: &PricingConfig,
    runs: usize,
    costs: &CostGenerator,
    seed: u64,
) -> Result<BenchmarkReport, PricingError> {
    benchmark_labeled("configured", models, config, runs, costs, seed)
}

fn benchmark_labeled(
    label: &str,
    models: &[DemandModel],
    config: &PricingConfig,
    runs: usize,
    costs: &CostGenerator,
    seed: u64,
) -> Result<BenchmarkReport, PricingError> {
    if runs == 0 {
        return Err(PricingError::Invalid("at least one benchmark run is required".into()));
    }
    let results: Vec<BenchmarkRun> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let cost = costs.draw(seed, r)?;
            let p = build_problem(models.to_vec(), cost.clone(), config)?;
            let run_seed = group_seed(seed, 1000 + r);
            let multiple = solve_multiple(&p, run_seed)?;
            let uniform = solve_uniform(&p, run_seed)?;
            let tol = 1e-9 * uniform.profit.abs().max(1.0);
            if multiple.profit < uniform.profit - tol {
                return Err(PricingError::Solver(format!(
                    "run {r}: multiple-pricing profit {} below uniform {}",
                    multiple.profit, uniform.profit
                )));
            }
            let denom = uniform.profit.abs();
            let relative_improvement = if denom > 0.0 { (multiple.profit - uniform.profit) / denom } else { 0.0 };
            Ok(BenchmarkRun {
                run: r,
                cost,
                multiple_profit: multiple.profit,
                uniform_profit: uniform.profit,
                relative_improvement,
            })
        })
        .collect::<Result<_, PricingError>>()?;
    let mean = results.iter().map(|r| r.relative_improvement).sum::<f64>() / runs as f64;
    Ok(BenchmarkReport {
        label: label.to_string(),
        config: config.clone(),
        seed,
        runs: results,
        mean_relative_improvement: mean,
        format_version: FORMAT_VERSION,
    })
}

/// The benchmark under each side-constraint combination the config allows:
/// flat price only, revenue cap only, and both.
pub fn benchmark_variants(
    models: &[DemandModel],
    config: &PricingConfig,
    runs: usize,
    costs: &CostGenerator,
    seed: u64,
) -> Result<Vec<BenchmarkReport>, PricingError> {
    let mut variants = Vec::new();
    if config.flat_price.is_some() {
        variants.push(("flat-price", PricingConfig { revenue_cap: None, ..config.clone() }));
    }
    if config.revenue_cap.is_some() {
        variants.push(("revenue-cap", PricingConfig { flat_price: None, ..config.clone() }));
        if config.flat_price.is_some() {
            variants.push(("flat-price+revenue-cap", config.clone()));
        }
    }
    if variants.is_empty() {
        variants.push(("bounds-only", config.clone()));
    }
    variants.into_iter().map(|(label, cfg)| benchmark_labeled(label, models, &cfg, runs, costs, seed)).collect()
}
