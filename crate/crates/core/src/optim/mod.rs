//! Solver kernel.
//!
//! * [`solve_qp`]: convex quadratic programs with linear equality, linear
//!   inequality and bound constraints (primal active-set method).
//! * [`maximize_pricing`]: multi-start projected ascent for quadratic
//!   objectives of unknown curvature over a box, linear equalities and an
//!   optional quadratic inequality.
//! * [`grid_oracle`]: exhaustive grid scan of small instances, used to check
//!   the local solver.

mod cholesky;
mod grid;
mod nlp;
mod projection;
mod qp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::grid_oracle;
pub use nlp::{maximize_pricing, maximize_pricing_with, AscentOptions, NlpProblem, QuadraticConstraint};
pub use qp::{solve_qp, QpProblem};

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// Certified global optimum.
    Optimal,
    /// Best local optimum found; global optimality not certified.
    LocalOptimal,
    MaxIterations,
    Infeasible,
}

/// A constraint that is active at a returned point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActiveConstraint {
    Lower(usize),
    Upper(usize),
    Inequality(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub point: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Scaled KKT residual (stationarity, feasibility, complementarity).
    pub kkt_residual: f64,
    pub iterations: usize,
    pub starts_used: usize,
    /// Working set at termination (active-set solver only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub active: Vec<ActiveConstraint>,
    /// Multiplier of the quadratic inequality, when one was present and active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_multiplier: Option<f64>,
    /// Whether the reduced problem was proven concave (maximization) or
    /// convex (minimization), so that the local optimum is global.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certified_global: Option<bool>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("infeasible: minimum total violation {violation:.3e}; violated: {violated:?}")]
    Infeasible {
        violation: f64,
        violated: Vec<String>,
    },
    #[error("objective unbounded below on the feasible set")]
    Unbounded,
    #[error("no feasible point found across {starts} starts")]
    NoFeasibleStart { starts: usize },
    #[error("grid oracle rejects reduced dimension {0} (max 4)")]
    GridDimension(usize),
    #[error("grid oracle would scan {0} points")]
    GridTooLarge(u128),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
