//! Feasible-start log-barrier Newton method for the allocation problem.
//!
//! The epigraph form minimizes, over `x = [w_0, u_0, ..., w_{H-1}, u_{H-1}]`,
//!
//! ```text
//! F(x) = Σ_k [ -r̂_k·w_k + γσ w_kᵀΣw_k + γt Σ_i ((b/2) u_{k,i} + c_i u_{k,i}^{3/2}) ] / scale
//! ```
//!
//! subject to `1ᵀw_k = 1`, `w_{k,i} ≥ floor_i`, and `u_{k,i} ≥ ±Δw_{k,i}`,
//! where `Δw_k = w_k - w_{k-1}` chains to the current weights. Because the
//! `u` terms carry nonnegative coefficients, at the optimum `u = |Δw|` and
//! the epigraph objective equals the true one.
//!
//! Standard path-following: minimize `t·F + φ` with `φ` the log barrier
//! over the inequalities, Newton steps restricted to the equality manifold,
//! and `t` increased geometrically until `m / t` clears the tolerance.

use nalgebra::{DMatrix, DVector};

use super::{MpcProblem, SolverStatus};

pub(crate) struct BarrierOutcome {
    pub weights: Vec<DVector<f64>>,
    pub status: SolverStatus,
    pub iterations: usize,
}

const T_GROWTH: f64 = 20.0;
const MAX_INNER: usize = 80;
const NEWTON_DECREMENT_TOL: f64 = 1e-11;
const ARMIJO_SLOPE: f64 = 0.25;
const MIN_STEP: f64 = 1e-14;
/// Upper bound on the epigraph variables. `|Δw|` never exceeds 1 between
/// simplex points, so the cap cannot bind at an optimum; it exists to keep
/// the barrier subproblem bounded when the trade penalty is zero.
const U_CAP: f64 = 2.0;

struct Layout {
    n: usize,
    block: usize,
}

impl Layout {
    fn new(p: &MpcProblem) -> Self {
        Layout {
            n: p.n,
            block: 2 * p.n + 1,
        }
    }

    fn w(&self, k: usize, i: usize) -> usize {
        k * self.block + i
    }

    fn u(&self, k: usize, i: usize) -> usize {
        k * self.block + self.n + 1 + i
    }

    fn dim(&self, h: usize) -> usize {
        h * self.block
    }
}

/// Visits every inequality constraint as (slack, sparse row of the
/// constraint normal). Slacks must stay strictly positive.
fn for_each_constraint(
    p: &MpcProblem,
    lay: &Layout,
    x: &DVector<f64>,
    mut visit: impl FnMut(f64, &[(usize, f64)]),
) {
    let n = p.n;
    for k in 0..p.h {
        for i in 0..=n {
            let idx = lay.w(k, i);
            visit(x[idx] - p.floor[i], &[(idx, 1.0)]);
        }
        for i in 0..n {
            let wi = lay.w(k, i);
            let ui = lay.u(k, i);
            if k == 0 {
                let delta = x[wi] - p.w_current[i];
                visit(x[ui] - delta, &[(ui, 1.0), (wi, -1.0)]);
                visit(x[ui] + delta, &[(ui, 1.0), (wi, 1.0)]);
            } else {
                let wp = lay.w(k - 1, i);
                let delta = x[wi] - x[wp];
                visit(x[ui] - delta, &[(ui, 1.0), (wi, -1.0), (wp, 1.0)]);
                visit(x[ui] + delta, &[(ui, 1.0), (wi, 1.0), (wp, -1.0)]);
            }
            visit(U_CAP - x[ui], &[(ui, -1.0)]);
        }
    }
}

/// Normalized smooth objective value.
fn objective_value(p: &MpcProblem, lay: &Layout, x: &DVector<f64>, scale: f64) -> f64 {
    let n = p.n;
    let mut total = 0.0;
    for k in 0..p.h {
        let w = DVector::from_fn(n + 1, |i, _| x[lay.w(k, i)]);
        total += -p.returns[k].dot(&w) + p.gamma_sigma * w.dot(&(&p.sigma * &w));
        for i in 0..n {
            let u = x[lay.u(k, i)];
            total += p.gamma_trade * (p.half_spread * u + p.impact[i] * u * u.sqrt());
        }
    }
    total / scale
}

/// Barrier value; +inf outside the strictly feasible region.
fn barrier_value(p: &MpcProblem, lay: &Layout, x: &DVector<f64>) -> f64 {
    let mut phi = 0.0;
    let mut feasible = true;
    for_each_constraint(p, lay, x, |s, _| {
        if s <= 0.0 {
            feasible = false;
        } else {
            phi -= s.ln();
        }
    });
    if feasible {
        phi
    } else {
        f64::INFINITY
    }
}

fn merit(p: &MpcProblem, lay: &Layout, x: &DVector<f64>, t_bar: f64, scale: f64) -> f64 {
    let phi = barrier_value(p, lay, x);
    if !phi.is_finite() {
        return f64::INFINITY;
    }
    t_bar * objective_value(p, lay, x, scale) + phi
}

/// Gradient and Hessian of `t·F + φ`.
fn assemble(
    p: &MpcProblem,
    lay: &Layout,
    x: &DVector<f64>,
    t_bar: f64,
    scale: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = p.n;
    let dim = lay.dim(p.h);
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);

    let tf = t_bar / scale;
    for k in 0..p.h {
        let w = DVector::from_fn(n + 1, |i, _| x[lay.w(k, i)]);
        let sigma_w = &p.sigma * &w;
        for i in 0..=n {
            grad[lay.w(k, i)] += tf * (-p.returns[k][i] + 2.0 * p.gamma_sigma * sigma_w[i]);
            for j in 0..=n {
                hess[(lay.w(k, i), lay.w(k, j))] += tf * 2.0 * p.gamma_sigma * p.sigma[(i, j)];
            }
        }
        for i in 0..n {
            let u = x[lay.u(k, i)];
            let su = u.sqrt();
            grad[lay.u(k, i)] +=
                tf * p.gamma_trade * (p.half_spread + 1.5 * p.impact[i] * su);
            if su > 0.0 {
                hess[(lay.u(k, i), lay.u(k, i))] += tf * p.gamma_trade * 0.75 * p.impact[i] / su;
            }
        }
    }

    for_each_constraint(p, lay, x, |s, row| {
        let inv = 1.0 / s;
        let inv2 = inv * inv;
        for &(a, ca) in row {
            grad[a] -= ca * inv;
            for &(b, cb) in row {
                hess[(a, b)] += ca * cb * inv2;
            }
        }
    });

    (grad, hess)
}

/// Largest step along `dx` keeping every slack positive.
fn max_feasible_step(p: &MpcProblem, lay: &Layout, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for_each_constraint(p, lay, x, |s, row| {
        let rate: f64 = row.iter().map(|&(i, c)| c * dx[i]).sum();
        if rate < 0.0 {
            alpha = alpha.min(s / -rate);
        }
    });
    alpha
}

pub(crate) fn solve_barrier(p: &MpcProblem, tol: f64, max_newton: usize) -> BarrierOutcome {
    let lay = Layout::new(p);
    let n = p.n;
    let h = p.h;
    let dim = lay.dim(h);
    let n_eq = h;
    let m_ineq = (h * (4 * n + 1)) as f64;
    let scale = p.scale();

    // Strictly feasible start: floors plus an equal share of the slack, and
    // epigraph variables comfortably above |Δw|.
    let head_room = 1.0 - p.floor.iter().sum::<f64>();
    let mut x = DVector::zeros(dim);
    for k in 0..h {
        for i in 0..=n {
            x[lay.w(k, i)] = p.floor[i] + head_room / (n + 1) as f64;
        }
    }
    for k in 0..h {
        for i in 0..n {
            let prev = if k == 0 {
                p.w_current[i]
            } else {
                x[lay.w(k - 1, i)]
            };
            x[lay.u(k, i)] = (x[lay.w(k, i)] - prev).abs() + 0.1;
        }
    }

    let mut t_bar = 1.0;
    // The certified gap is m / t̄; stop exactly where the tolerance is met.
    // Beyond ~1e14 the barrier slacks leave f64 territory, so a tighter
    // request degrades to best effort (reported via MaxIterations).
    let t_target = (m_ineq / tol).min(1e14).max(1.0);
    let mut iterations = 0usize;
    let mut stage_centered;
    let mut exhausted = false;

    let trace = std::env::var_os("MPO_BARRIER_TRACE").is_some();
    loop {
        stage_centered = false;
        let mut stage_iters = 0usize;
        let mut last_decrement = f64::NAN;
        for _ in 0..MAX_INNER {
            if iterations >= max_newton {
                exhausted = true;
                break;
            }
            iterations += 1;
            stage_iters += 1;

            let (grad, hess) = assemble(p, &lay, &x, t_bar, scale);

            // KKT system with the per-step budget equalities.
            let mut kkt = DMatrix::zeros(dim + n_eq, dim + n_eq);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&hess);
            for k in 0..h {
                for i in 0..=n {
                    kkt[(lay.w(k, i), dim + k)] = 1.0;
                    kkt[(dim + k, lay.w(k, i))] = 1.0;
                }
            }
            let mut rhs = DVector::zeros(dim + n_eq);
            for i in 0..dim {
                rhs[i] = -grad[i];
            }
            for k in 0..h {
                let row_sum: f64 = (0..=n).map(|i| x[lay.w(k, i)]).sum();
                rhs[dim + k] = 1.0 - row_sum;
            }

            let solution = kkt.clone().lu().solve(&rhs).or_else(|| {
                // Retry with a small diagonal shift if the factorization hit
                // a numerically singular pivot.
                let mut damped = kkt;
                let bump = 1e-10 * (1.0 + hess.diagonal().amax());
                for i in 0..dim {
                    damped[(i, i)] += bump;
                }
                damped.lu().solve(&rhs)
            });
            let Some(solution) = solution else {
                exhausted = true;
                break;
            };
            let dx = DVector::from_fn(dim, |i, _| solution[i]);

            let decrement2 = dx.dot(&(&hess * &dx));
            last_decrement = decrement2;
            if !decrement2.is_finite() {
                exhausted = true;
                break;
            }
            // Stopping at decrement² d leaves ~d / t̄ of objective-scale
            // suboptimality, so the threshold may relax as t̄ grows; this is
            // what keeps the final stages within f64 reach.
            let centering_tol = NEWTON_DECREMENT_TOL.max(0.01 * tol * t_bar);
            if 0.5 * decrement2 <= centering_tol {
                stage_centered = true;
                break;
            }

            let slope = grad.dot(&dx);
            let mut alpha = (0.99 * max_feasible_step(p, &lay, &x, &dx)).min(1.0);
            let merit0 = merit(p, &lay, &x, t_bar, scale);
            let mut moved = false;
            while alpha >= MIN_STEP {
                let candidate = &x + alpha * &dx;
                let value = merit(p, &lay, &candidate, t_bar, scale);
                if value <= merit0 + ARMIJO_SLOPE * alpha * slope {
                    x = candidate;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                // Stuck against the boundary at this centering accuracy.
                stage_centered = 0.5 * decrement2 <= 1e-6;
                break;
            }
        }

        if trace {
            eprintln!(
                "barrier stage t={t_bar:.3e} inner={stage_iters} decrement2={last_decrement:.3e} centered={stage_centered} total={iterations}"
            );
        }
        if exhausted {
            break;
        }
        if t_bar >= t_target {
            break;
        }
        t_bar = (t_bar * T_GROWTH).min(t_target);
    }

    let weights = (0..h)
        .map(|k| DVector::from_fn(n + 1, |i, _| x[lay.w(k, i)]))
        .collect();
    let converged = !exhausted && stage_centered && m_ineq / t_bar <= tol;
    BarrierOutcome {
        weights,
        status: if converged {
            SolverStatus::Optimal
        } else {
            SolverStatus::MaxIterations
        },
        iterations,
    }
}
