use super::*;
use crate::cost::CostParams;
use crate::estimators::EstimateSet;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_psd(rng: &mut ChaCha8Rng, n: usize, vol_scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut s = &a * a.transpose() * (vol_scale * vol_scale / n as f64);
    for i in 0..n {
        s[(i, i)] += 1e-8;
    }
    s
}

struct Instance {
    estimates: EstimateSet,
    costs: CostParams,
    w_current: DVector<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Instance {
    let raw = DMatrix::from_fn(n, h, |_, _| rng.gen_range(-0.01..0.01));
    let boosted = raw.map(|v| v + rng.gen_range(-0.002..0.002));
    let risky = random_psd(rng, n, 0.02);
    let mut sigma = DMatrix::zeros(n + 1, n + 1);
    sigma.view_mut((0, 0), (n, n)).copy_from(&risky);
    let ewm_sigma = DVector::from_fn(n, |_, _| rng.gen_range(0.002..0.03));
    let ewm_volume = DVector::from_fn(n, |_, _| rng.gen_range(1e5..1e7));
    let estimates = EstimateSet {
        t: 600,
        date: chrono::NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(),
        raw,
        boosted,
        sigma,
        ewm_sigma: ewm_sigma.clone(),
        ewm_volume: ewm_volume.clone(),
        cash_rate: 1e-5,
    };
    let costs = CostParams::new(0.002, ewm_sigma, ewm_volume, 26_000.0).unwrap();
    // Random interior starting weights.
    let mut w = DVector::from_fn(n + 1, |_, _| rng.gen_range(0.05..1.0));
    let total: f64 = w.iter().sum();
    w /= total;
    Instance {
        estimates,
        costs,
        w_current: w,
    }
}

fn assert_plan_feasible(plan: &AllocationPlan, n: usize, min_weight: f64) {
    assert_ne!(plan.status, SolverStatus::Infeasible);
    for w in &plan.weights {
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-8, "weights sum to {sum}");
        for i in 0..n {
            assert!(
                w[i] >= min_weight - 1e-9,
                "risky weight {} below floor {min_weight}",
                w[i]
            );
        }
        assert!(w[n] >= -1e-9, "cash weight {} negative", w[n]);
    }
}

#[test]
fn identical_assets_get_identical_weights() {
    let mut sigma = DMatrix::zeros(3, 3);
    sigma[(0, 0)] = 4e-4;
    sigma[(1, 1)] = 4e-4;
    let estimates = EstimateSet {
        t: 600,
        date: chrono::NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(),
        raw: DMatrix::from_element(2, 2, 0.004),
        boosted: DMatrix::from_element(2, 2, 0.004),
        sigma,
        ewm_sigma: DVector::from_element(2, 0.01),
        ewm_volume: DVector::from_element(2, 1e6),
        cash_rate: 0.0,
    };
    let costs = CostParams::new(
        0.002,
        estimates.ewm_sigma.clone(),
        estimates.ewm_volume.clone(),
        26_000.0,
    )
    .unwrap();
    let w_current = DVector::from_column_slice(&[0.4, 0.4, 0.2]);
    let config = MpcConfig::default();
    let plan = solve(&estimates, &w_current, &costs, &config).unwrap();
    assert_eq!(plan.status, SolverStatus::Optimal);
    assert_plan_feasible(&plan, 2, config.min_weight);
    for w in &plan.weights {
        assert!(
            (w[0] - w[1]).abs() < 1e-7,
            "symmetric instance split asymmetrically: {} vs {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn huge_trade_penalty_freezes_the_portfolio() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = random_instance(&mut rng, 3, 2);
    let config = MpcConfig {
        gamma_trade: 1e9,
        ..MpcConfig::default()
    };
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    assert_plan_feasible(&plan, 3, config.min_weight);
    let mut prev = inst.w_current.clone();
    for w in &plan.weights {
        for i in 0..w.len() {
            assert!(
                (w[i] - prev[i]).abs() < 1e-4,
                "component {i} moved by {}",
                (w[i] - prev[i]).abs()
            );
        }
        prev = w.clone();
    }
}

#[test]
fn solver_matches_oracle_on_three_assets_two_steps() {
    // Brute force at step 0.005 is intractable for N=3, H=2 (the per-step
    // lattice alone has ~1.25e6 points), so this cross-check runs the full
    // combinatorial case on a 0.02 lattice; the acceptance suite covers the
    // 0.005 lattice on the instance sizes where it is feasible.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = random_instance(&mut rng, 3, 2);
    let config = MpcConfig::default(); // paper gammas
    let grid = 0.02;
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    let oracle =
        brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, grid).unwrap();
    let bound =
        grid_resolution_bound(&inst.estimates, &inst.w_current, &inst.costs, &config, grid)
            .unwrap();
    assert_eq!(plan.status, SolverStatus::Optimal);
    assert!(
        plan.objective >= oracle.objective - 1e-9 * (1.0 + oracle.objective.abs()),
        "solver {} fell below the grid optimum {}",
        plan.objective,
        oracle.objective
    );
    assert!(
        plan.objective <= oracle.objective + bound,
        "solver {} exceeds grid optimum {} by more than the resolution bound {bound}",
        plan.objective,
        oracle.objective
    );
}

#[test]
fn oracle_is_deterministic_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = random_instance(&mut rng, 2, 2);
    let config = MpcConfig::default();
    let a = brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, 0.02)
        .unwrap();
    let b = brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, 0.02)
        .unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        assert_eq!(wa, wb);
    }
}

#[test]
fn oracle_guard_rejects_large_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = random_instance(&mut rng, 3, 2);
    let config = MpcConfig::default();
    // N = 3, H = 2 at step 0.005 explodes combinatorially.
    match brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, 0.005) {
        Err(MpcError::OracleGuard(_)) => {}
        other => panic!("expected a guard error, got {other:?}"),
    }
    let big = random_instance(&mut rng, 5, 1);
    let one_step = MpcConfig {
        horizon: 1,
        ..MpcConfig::default()
    };
    assert!(matches!(
        brute_force_oracle(&big.estimates, &big.w_current, &big.costs, &one_step, 0.05),
        Err(MpcError::OracleGuard(_))
    ));
}

#[test]
fn oracle_matches_one_dimensional_analytic_maximum() {
    // One risky asset + cash reduces to maximizing a strictly concave
    // function of the single risky weight; golden-section search is the
    // independent reference.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = random_instance(&mut rng, 1, 1);
    let config = MpcConfig {
        horizon: 1,
        gamma_sigma: 2.0,
        gamma_trade: 1.0,
        ..MpcConfig::default()
    };
    let grid = 0.005;
    let oracle =
        brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, grid).unwrap();

    let problem =
        MpcProblem::from_inputs(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    let g = |w: f64| problem.objective(&[DVector::from_column_slice(&[w, 1.0 - w])]);
    // Golden-section search on [min_weight, 1].
    let (mut lo, mut hi) = (config.min_weight, 1.0);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-10 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if g(m1) < g(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let analytic = 0.5 * (lo + hi);
    assert!(
        (oracle.weights[0][0] - analytic).abs() <= grid + 1e-9,
        "oracle picked {} but the 1-D maximum is {analytic}",
        oracle.weights[0][0]
    );
}

#[test]
fn oracle_with_no_penalties_goes_all_in_on_the_best_asset() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inst = random_instance(&mut rng, 3, 1);
    inst.estimates.boosted = DMatrix::from_fn(3, 1, |i, _| 0.002 + 0.003 * i as f64);
    inst.estimates.cash_rate = 0.0;
    let config = MpcConfig {
        horizon: 1,
        gamma_sigma: 0.0,
        gamma_trade: 0.0,
        ..MpcConfig::default()
    };
    let oracle =
        brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, 0.01).unwrap();
    let w = &oracle.weights[0];
    // Linear objective on the floored simplex: everything not pinned by the
    // floors lands on the best estimate (asset 2).
    assert!((w[0] - 0.01).abs() < 1e-12);
    assert!((w[1] - 0.01).abs() < 1e-12);
    assert!((w[2] - 0.98).abs() < 1e-12);
    assert!(w[3].abs() < 1e-12);
}

#[test]
fn solve_beats_every_grid_point_on_small_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..6 {
        let (n, h) = [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (2, 2)][trial];
        let inst = random_instance(&mut rng, n, h);
        let config = MpcConfig {
            horizon: h,
            ..MpcConfig::default()
        };
        let grid = 0.02;
        let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
        let oracle =
            brute_force_oracle(&inst.estimates, &inst.w_current, &inst.costs, &config, grid)
                .unwrap();
        assert_plan_feasible(&plan, n, config.min_weight);
        assert!(
            plan.objective >= oracle.objective - 1e-9 * (1.0 + oracle.objective.abs()),
            "trial {trial}: solver {} < oracle {}",
            plan.objective,
            oracle.objective
        );
    }
}

#[test]
fn argmax_is_invariant_under_joint_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inst = random_instance(&mut rng, 3, 2);
    let config = MpcConfig::default();
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();

    let c = 37.0;
    let mut scaled = inst.estimates.clone();
    scaled.raw *= c;
    scaled.boosted *= c;
    scaled.cash_rate *= c;
    let scaled_config = MpcConfig {
        gamma_sigma: config.gamma_sigma * c,
        gamma_trade: config.gamma_trade * c,
        ..config
    };
    let scaled_plan = solve(&scaled, &inst.w_current, &inst.costs, &scaled_config).unwrap();

    for (w, ws) in plan.weights.iter().zip(&scaled_plan.weights) {
        for i in 0..w.len() {
            assert!(
                (w[i] - ws[i]).abs() < 1e-6,
                "scaling moved weight {i}: {} vs {}",
                w[i],
                ws[i]
            );
        }
    }
    assert!(
        (scaled_plan.objective - c * plan.objective).abs()
            <= 1e-6 * (1.0 + (c * plan.objective).abs()),
        "objective should scale linearly"
    );
}

#[test]
fn turnover_is_monotone_in_the_trade_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gammas = [0.01, 0.1, 1.0, 10.0];
    let mut mean_turnover = [0.0f64; 4];
    let instances: Vec<Instance> = (0..20).map(|_| random_instance(&mut rng, 3, 2)).collect();
    for inst in &instances {
        for (gi, &gt) in gammas.iter().enumerate() {
            let config = MpcConfig {
                gamma_trade: gt,
                ..MpcConfig::default()
            };
            let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
            let turnover: f64 = (0..inst.w_current.len())
                .map(|i| (plan.weights[0][i] - inst.w_current[i]).abs())
                .sum();
            mean_turnover[gi] += turnover / instances.len() as f64;
        }
    }
    for pair in mean_turnover.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "mean turnover increased along the penalty grid: {mean_turnover:?}"
        );
    }
}

#[test]
fn first_step_risk_is_monotone_in_risk_aversion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gammas = [0.01, 0.1, 1.0, 10.0, 100.0];
    let mut mean_risk = [0.0f64; 5];
    let instances: Vec<Instance> = (0..20).map(|_| random_instance(&mut rng, 3, 2)).collect();
    for inst in &instances {
        for (gi, &gs) in gammas.iter().enumerate() {
            let config = MpcConfig {
                gamma_sigma: gs,
                ..MpcConfig::default()
            };
            let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
            let w = &plan.weights[0];
            let risk = w.dot(&(&inst.estimates.sigma * w));
            mean_risk[gi] += risk / instances.len() as f64;
        }
    }
    for pair in mean_risk.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "mean first-step risk increased along the aversion grid: {mean_risk:?}"
        );
    }
}

#[test]
fn infeasible_floor_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inst = random_instance(&mut rng, 3, 1);
    let config = MpcConfig {
        horizon: 1,
        min_weight: 0.4, // 3 * 0.4 > 1
        ..MpcConfig::default()
    };
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    assert_eq!(plan.status, SolverStatus::Infeasible);
}

#[test]
fn exactly_binding_floors_pin_the_unique_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = random_instance(&mut rng, 2, 2);
    let config = MpcConfig {
        min_weight: 0.5, // 2 * 0.5 == 1: the only feasible point
        ..MpcConfig::default()
    };
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    assert_eq!(plan.status, SolverStatus::Optimal);
    for w in &plan.weights {
        assert_eq!(w[0], 0.5);
        assert_eq!(w[1], 0.5);
        assert_eq!(w[2], 0.0);
    }
}

#[test]
fn pure_linear_problem_hits_the_floors() {
    // gamma_sigma = gamma_trade = 0 turns the program into an LP; the
    // barrier must still drive the solution to the vertex.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut inst = random_instance(&mut rng, 2, 1);
    inst.estimates.boosted = DMatrix::from_fn(2, 1, |i, _| if i == 0 { 0.01 } else { -0.01 });
    inst.estimates.cash_rate = 0.0;
    let config = MpcConfig {
        horizon: 1,
        gamma_sigma: 0.0,
        gamma_trade: 0.0,
        ..MpcConfig::default()
    };
    let plan = solve(&inst.estimates, &inst.w_current, &inst.costs, &config).unwrap();
    assert_eq!(plan.status, SolverStatus::Optimal);
    let w = &plan.weights[0];
    assert!((w[0] - 0.99).abs() < 1e-6, "winner weight {}", w[0]);
    assert!((w[1] - 0.01).abs() < 1e-6, "floored weight {}", w[1]);
}

