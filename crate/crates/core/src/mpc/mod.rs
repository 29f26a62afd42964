//! Multi-step allocation solver.
//!
//! At each decision date the allocator maximizes, over the planned weight
//! sequence `w_1..w_H` (risky assets plus cash, chained to the current
//! weights),
//!
//! ```text
//! Σ_k  r̂_k·w_k  -  γ_sigma · w_kᵀ Σ̂ w_k  -  γ_trade · Σ_i TC(Δw_{k,i})
//! ```
//!
//! subject to each `w_k` lying on the simplex with a per-risky-asset floor.
//! The `|Δw|` and `|Δw|^(3/2)` cost terms are handled by an epigraph
//! variable per risky asset per step, and the resulting smooth convex
//! program is solved by a feasible-start log-barrier Newton method (see
//! [`barrier`]). Only the first step of a plan is ever executed.
//!
//! [`brute_force_oracle`] evaluates the same objective on every grid point
//! of the feasible region and serves as the solver's independent check on
//! small instances.

mod barrier;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostParams};
use crate::estimators::EstimateSet;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error("oracle instance too large: {0}")]
    OracleGuard(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// Allocator knobs. The gamma defaults are the tuned values the pipeline
/// ships with; both are expected to be re-tuned per dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    /// Risk-aversion weight on `wᵀΣw`.
    pub gamma_sigma: f64,
    /// Trading-penalty weight on the transaction-cost term.
    pub gamma_trade: f64,
    /// Per-risky-asset weight floor (cash floor is zero).
    pub min_weight: f64,
    /// Relative objective tolerance of the solver.
    pub tolerance: f64,
    /// Cap on total Newton iterations across the barrier path.
    pub max_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 2,
            gamma_sigma: 0.1262,
            gamma_trade: 4.6670,
            min_weight: 0.01,
            tolerance: 1e-8,
            max_iterations: 600,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon < 1 {
            return Err(MpcError::Invalid("horizon must be >= 1".to_string()));
        }
        if !(self.gamma_sigma >= 0.0) || !(self.gamma_trade >= 0.0) {
            return Err(MpcError::Invalid(
                "gamma_sigma and gamma_trade must be >= 0".to_string(),
            ));
        }
        if !(self.min_weight >= 0.0) {
            return Err(MpcError::Invalid("min_weight must be >= 0".to_string()));
        }
        if !(self.tolerance > 0.0) {
            return Err(MpcError::Invalid("tolerance must be positive".to_string()));
        }
        Ok(())
    }
}

/// The H-step weight plan from one solve; `weights[k]` has the risky assets
/// first and cash last, and only `weights[0]` is executed.
#[derive(Debug, Clone)]
pub struct AllocationPlan {
    pub date: Option<NaiveDate>,
    pub weights: Vec<DVector<f64>>,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
}

impl AllocationPlan {
    pub fn first_step(&self) -> &DVector<f64> {
        &self.weights[0]
    }
}

/// Fully assembled instance handed to the barrier engine and the oracle.
#[derive(Debug, Clone)]
pub(crate) struct MpcProblem {
    pub n: usize,
    pub h: usize,
    /// Per-step expected returns, cash last.
    pub returns: Vec<DVector<f64>>,
    pub sigma: DMatrix<f64>,
    pub gamma_sigma: f64,
    pub gamma_trade: f64,
    pub half_spread: f64,
    /// Impact coefficient per risky asset (multiplier of `|Δw|^(3/2)`).
    pub impact: DVector<f64>,
    /// Per-component weight floor, cash last (= 0).
    pub floor: DVector<f64>,
    pub w_current: DVector<f64>,
}

impl MpcProblem {
    pub fn from_inputs(
        estimates: &EstimateSet,
        w_current: &DVector<f64>,
        costs: &CostParams,
        config: &MpcConfig,
    ) -> Result<Self, MpcError> {
        config.validate()?;
        let n = estimates.n_assets();
        if n == 0 {
            return Err(MpcError::Invalid("need at least one risky asset".to_string()));
        }
        if estimates.horizon() < config.horizon {
            return Err(MpcError::Invalid(format!(
                "estimates cover {} steps but horizon is {}",
                estimates.horizon(),
                config.horizon
            )));
        }
        if costs.n_assets() != n {
            return Err(MpcError::Invalid(
                "cost snapshot asset count differs from estimates".to_string(),
            ));
        }
        if w_current.len() != n + 1 {
            return Err(MpcError::Invalid(format!(
                "w_current has {} components, expected {}",
                w_current.len(),
                n + 1
            )));
        }
        let sum: f64 = w_current.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MpcError::Invalid(format!(
                "w_current sums to {sum}, expected 1"
            )));
        }
        if estimates.sigma.nrows() != n + 1 {
            return Err(MpcError::Invalid(
                "covariance shape differs from estimates".to_string(),
            ));
        }
        let impact = DVector::from_fn(n, |i, _| costs.impact_coefficient(i).unwrap_or(f64::NAN));
        if impact.iter().any(|c| c.is_nan()) {
            // Surface the illiquidity error with its asset index.
            for i in 0..n {
                costs.impact_coefficient(i)?;
            }
        }
        let mut floor = DVector::zeros(n + 1);
        for i in 0..n {
            floor[i] = config.min_weight;
        }
        Ok(MpcProblem {
            n,
            h: config.horizon,
            returns: (0..config.horizon).map(|k| estimates.step_returns(k)).collect(),
            sigma: estimates.sigma.clone(),
            gamma_sigma: config.gamma_sigma,
            gamma_trade: config.gamma_trade,
            half_spread: 0.5 * costs.spread,
            impact,
            floor,
            w_current: w_current.clone(),
        })
    }

    /// Transaction cost of moving `from` to `to` (risky components only),
    /// as a fraction of portfolio value.
    pub fn transition_cost(&self, from: &DVector<f64>, to: &DVector<f64>) -> f64 {
        let mut tc = 0.0;
        for i in 0..self.n {
            let d = (to[i] - from[i]).abs();
            tc += self.half_spread * d + self.impact[i] * d * d.sqrt();
        }
        tc
    }

    /// The maximized objective for a candidate weight sequence.
    pub fn objective(&self, weights: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        let mut prev = &self.w_current;
        for (k, w) in weights.iter().enumerate() {
            let quad = w.dot(&(&self.sigma * w));
            total += self.returns[k].dot(w) - self.gamma_sigma * quad
                - self.gamma_trade * self.transition_cost(prev, w);
            prev = w;
        }
        total
    }

    /// Magnitude used to normalize the objective before solving, so the
    /// barrier tolerances are relative to the instance's natural scale.
    pub fn scale(&self) -> f64 {
        let r_scale = self
            .returns
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let s_scale = self.gamma_sigma * self.sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let c_scale = self.gamma_trade
            * (self.half_spread + self.impact.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        r_scale.max(s_scale).max(c_scale).max(1e-12)
    }

    /// Total floor slack; negative means the floors are infeasible.
    fn floor_slack(&self) -> f64 {
        1.0 - self.floor.iter().sum::<f64>()
    }
}

/// Solves the H-step allocation problem at one decision date.
///
/// The returned plan is strictly feasible (each step on the simplex, risky
/// floors respected) for every status except `Infeasible`, and its
/// objective is within the configured tolerance of the optimum whenever the
/// status is `Optimal`.
pub fn solve(
    estimates: &EstimateSet,
    w_current: &DVector<f64>,
    costs: &CostParams,
    config: &MpcConfig,
) -> Result<AllocationPlan, MpcError> {
    let problem = MpcProblem::from_inputs(estimates, w_current, costs, config)?;
    let slack = problem.floor_slack();
    if slack < -1e-12 {
        return Ok(AllocationPlan {
            date: Some(estimates.date),
            weights: vec![w_current.clone(); problem.h],
            objective: f64::NAN,
            status: SolverStatus::Infeasible,
            iterations: 0,
        });
    }
    if slack <= 1e-12 {
        // The floors pin the entire simplex: exactly one feasible point.
        let mut w = problem.floor.clone();
        let total: f64 = w.iter().sum();
        w[problem.n] += 1.0 - total;
        let weights = vec![w; problem.h];
        let objective = problem.objective(&weights);
        return Ok(AllocationPlan {
            date: Some(estimates.date),
            weights,
            objective,
            status: SolverStatus::Optimal,
            iterations: 0,
        });
    }

    let outcome = barrier::solve_barrier(&problem, config.tolerance, config.max_iterations);
    let objective = problem.objective(&outcome.weights);
    Ok(AllocationPlan {
        date: Some(estimates.date),
        weights: outcome.weights,
        objective,
        status: outcome.status,
        iterations: outcome.iterations,
    })
}

/// Hard caps keeping the exhaustive oracle tractable.
const ORACLE_MAX_ASSETS: usize = 4;
const ORACLE_MAX_HORIZON: usize = 2;
const ORACLE_MAX_EVALS: f64 = 1.5e9;
const ORACLE_MAX_STORED_POINTS: usize = 300_000;

/// Exhaustive grid search over the feasible simplex product.
///
/// Evaluates the exact objective on every point of the `grid_step` lattice
/// (per step, chained through the transaction-cost term) and returns the
/// argmax. Guarded to small instances; the evaluation count grows with the
/// number of lattice points raised to the horizon.
pub fn brute_force_oracle(
    estimates: &EstimateSet,
    w_current: &DVector<f64>,
    costs: &CostParams,
    config: &MpcConfig,
    grid_step: f64,
) -> Result<AllocationPlan, MpcError> {
    use rayon::prelude::*;

    let problem = MpcProblem::from_inputs(estimates, w_current, costs, config)?;
    if problem.n > ORACLE_MAX_ASSETS {
        return Err(MpcError::OracleGuard(format!(
            "{} risky assets exceeds the oracle cap of {ORACLE_MAX_ASSETS}",
            problem.n
        )));
    }
    if problem.h > ORACLE_MAX_HORIZON {
        return Err(MpcError::OracleGuard(format!(
            "horizon {} exceeds the oracle cap of {ORACLE_MAX_HORIZON}",
            problem.h
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(MpcError::Invalid(format!("bad grid step {grid_step}")));
    }
    if problem.floor_slack() < -1e-12 {
        return Ok(AllocationPlan {
            date: Some(estimates.date),
            weights: vec![w_current.clone(); problem.h],
            objective: f64::NAN,
            status: SolverStatus::Infeasible,
            iterations: 0,
        });
    }

    let units = (1.0 / grid_step).round() as u64;
    let min_units: Vec<u64> = (0..=problem.n)
        .map(|i| (problem.floor[i] / grid_step - 1e-9).ceil().max(0.0) as u64)
        .collect();
    let reserved: u64 = min_units.iter().sum();
    if reserved > units {
        return Err(MpcError::OracleGuard(format!(
            "floors need {reserved} grid units but only {units} exist at step {grid_step}"
        )));
    }

    let n_points = compositions_count(units - reserved, problem.n + 1);
    let evals = n_points.powi(problem.h as i32);
    if evals > ORACLE_MAX_EVALS {
        return Err(MpcError::OracleGuard(format!(
            "{n_points:.3e} lattice points per step would need {evals:.3e} evaluations"
        )));
    }

    let dim = problem.n + 1;
    let date = Some(estimates.date);

    if problem.h == 1 {
        // Streamed: no need to materialize the lattice.
        let mut best = (f64::NEG_INFINITY, DVector::zeros(dim));
        let mut point = vec![0u64; dim];
        enumerate_compositions(units, &min_units, &mut point, 0, &mut |units_pt| {
            let w = DVector::from_fn(dim, |i, _| units_pt[i] as f64 * grid_step);
            let obj = problem.objective(std::slice::from_ref(&w));
            if obj > best.0 {
                best = (obj, w);
            }
        });
        let weights = vec![best.1];
        let objective = problem.objective(&weights);
        return Ok(AllocationPlan {
            date,
            weights,
            objective,
            status: SolverStatus::Optimal,
            iterations: n_points as usize,
        });
    }

    // H = 2: materialize the per-step lattice with precomputed stage values.
    if n_points as usize > ORACLE_MAX_STORED_POINTS {
        return Err(MpcError::OracleGuard(format!(
            "{n_points:.3e} lattice points exceed the storage cap"
        )));
    }
    let mut flat: Vec<f64> = Vec::with_capacity(n_points as usize * dim);
    let mut point = vec![0u64; dim];
    enumerate_compositions(units, &min_units, &mut point, 0, &mut |units_pt| {
        flat.extend(units_pt.iter().map(|&u| u as f64 * grid_step));
    });
    let p_total = flat.len() / dim;

    // stage1(p) = r_1·p - γσ pᵀΣp - γt TC(w_current -> p)
    // base2(p)  = r_2·p - γσ pᵀΣp
    let mut stage1 = Vec::with_capacity(p_total);
    let mut base2 = Vec::with_capacity(p_total);
    for p in 0..p_total {
        let w = DVector::from_column_slice(&flat[p * dim..(p + 1) * dim]);
        let quad = w.dot(&(&problem.sigma * &w));
        stage1.push(
            problem.returns[0].dot(&w)
                - problem.gamma_sigma * quad
                - problem.gamma_trade * problem.transition_cost(&problem.w_current, &w),
        );
        base2.push(problem.returns[1].dot(&w) - problem.gamma_sigma * quad);
    }

    let n = problem.n;
    let hs = problem.half_spread;
    let gt = problem.gamma_trade;
    let impact = &problem.impact;
    let best = (0..p_total)
        .into_par_iter()
        .map(|p1| {
            let w1 = &flat[p1 * dim..(p1 + 1) * dim];
            let mut local = (f64::NEG_INFINITY, 0usize, 0usize);
            for p2 in 0..p_total {
                let w2 = &flat[p2 * dim..(p2 + 1) * dim];
                let mut tc = 0.0;
                for i in 0..n {
                    let d = (w2[i] - w1[i]).abs();
                    tc += hs * d + impact[i] * d * d.sqrt();
                }
                let obj = stage1[p1] + base2[p2] - gt * tc;
                if obj > local.0 {
                    local = (obj, p1, p2);
                }
            }
            local
        })
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX, usize::MAX),
            |a, b| {
                // Deterministic argmax: prefer higher objective, then lower indices.
                if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) {
                    b
                } else {
                    a
                }
            },
        );

    let (_, p1, p2) = best;
    let weights = vec![
        DVector::from_column_slice(&flat[p1 * dim..(p1 + 1) * dim]),
        DVector::from_column_slice(&flat[p2 * dim..(p2 + 1) * dim]),
    ];
    let objective = problem.objective(&weights);
    Ok(AllocationPlan {
        date,
        weights,
        objective,
        status: SolverStatus::Optimal,
        iterations: p_total * p_total,
    })
}

/// Upper bound on how far the grid optimum can sit below the true optimum:
/// a Lipschitz constant of the objective over the feasible box times the
/// grid step, summed over all coordinates.
pub fn grid_resolution_bound(
    estimates: &EstimateSet,
    w_current: &DVector<f64>,
    costs: &CostParams,
    config: &MpcConfig,
    grid_step: f64,
) -> Result<f64, MpcError> {
    let problem = MpcProblem::from_inputs(estimates, w_current, costs, config)?;
    let n = problem.n;
    let mut total = 0.0;
    for k in 0..problem.h {
        for i in 0..=n {
            let mut lip = problem.returns[k][i].abs();
            let row_sum: f64 = (0..=n).map(|j| problem.sigma[(i, j)].abs()).sum();
            lip += 2.0 * problem.gamma_sigma * row_sum;
            if i < n {
                // Each risky weight enters the cost of at most two transitions.
                lip += 2.0
                    * problem.gamma_trade
                    * (problem.half_spread + 1.5 * problem.impact[i]);
            }
            total += lip * grid_step;
        }
    }
    Ok(total)
}

/// Number of ways to distribute `free` units over `slots` bins (as f64 to
/// keep oversize instances comparable instead of overflowing).
fn compositions_count(free: u64, slots: usize) -> f64 {
    let mut acc = 1.0f64;
    for j in 1..slots as u64 {
        acc *= (free + j) as f64 / j as f64;
    }
    acc
}

/// Lexicographic enumeration of integer points on the scaled simplex with
/// per-component minimums.
fn enumerate_compositions(
    units: u64,
    min_units: &[u64],
    point: &mut Vec<u64>,
    idx: usize,
    visit: &mut impl FnMut(&[u64]),
) {
    let dim = min_units.len();
    let used: u64 = point[..idx].iter().sum();
    let remaining = units - used;
    if idx == dim - 1 {
        if remaining >= min_units[idx] {
            point[idx] = remaining;
            visit(point);
        }
        return;
    }
    let reserved_after: u64 = min_units[idx + 1..].iter().sum();
    if remaining < min_units[idx] + reserved_after {
        return;
    }
    for v in min_units[idx]..=(remaining - reserved_after) {
        point[idx] = v;
        enumerate_compositions(units, min_units, point, idx + 1, visit);
    }
}

#[cfg(test)]
mod tests;
