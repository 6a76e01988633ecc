use approx::assert_abs_diff_eq;
use wonham_mv::lattice::{build_grid, GridSpec, Lattice};
use wonham_mv::market::CoefficientPiece;
use wonham_mv::oracle::{
    marginal_check, simulate_chain, simulate_chain_paths, simulate_sde, simulate_sde_paths,
    ConstantPolicy, SdeConfig,
};
use wonham_mv::solver::occupancy;
use wonham_mv::{solve, Belief, ControlGrid, ControlPoint, RegimeModel, SolutionFields};

fn single_control(c: ControlPoint) -> ControlGrid {
    ControlGrid::from_controls(vec![c]).unwrap()
}

fn lattice(model: &RegimeModel, h1: f64, h2: f64, x_max: f64) -> Lattice {
    build_grid(
        GridSpec::new(h1, h2, 0.0, x_max, model.horizon).unwrap(),
        model.regimes,
    )
    .unwrap()
}

/// Market of the hand-worked stencil: zero rate, excess drift 0.1 and
/// volatility 0.2 in both regimes, signals (0, 1), no attention cost.
fn worked_market(horizon: f64) -> RegimeModel {
    RegimeModel {
        horizon,
        signal_levels: vec![0.0, 1.0],
        cost_coeff: 0.0,
        coefficients: vec![CoefficientPiece {
            start: 0.0,
            riskfree: vec![0.0, 0.0],
            drift: vec![vec![0.1], vec![0.1]],
            vol: vec![vec![vec![0.2]], vec![vec![0.2]]],
        }],
        ..RegimeModel::illustrative()
    }
}

/// No regime switching, equal signals, no rates, no cost.
fn frozen_market() -> RegimeModel {
    RegimeModel {
        horizon: 1.0,
        generator: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        signal_levels: vec![0.5, 0.5],
        cost_coeff: 0.0,
        attention_min: 0.5,
        attention_max: 1.0,
        coefficients: vec![CoefficientPiece {
            start: 0.0,
            riskfree: vec![0.0, 0.0],
            drift: vec![vec![0.0], vec![0.0]],
            vol: vec![vec![vec![0.2]], vec![vec![0.2]]],
        }],
        ..RegimeModel::illustrative()
    }
}

fn sde_cfg(n_paths: usize, seed: u64, step: f64) -> SdeConfig {
    SdeConfig {
        n_paths,
        seed,
        step,
        x_min: 0.0,
        x_max: 1e9,
    }
}

#[test]
fn pure_bond_grows_at_the_riskfree_rate() {
    let model = RegimeModel {
        cost_coeff: 0.0,
        horizon: 1.0,
        ..RegimeModel::illustrative()
    };
    let r = 0.03;
    let (x0, h) = (2.0, 0.001);
    let policy = ConstantPolicy(ControlPoint::new([0.0], model.attention_min));
    let s = simulate_sde(
        &model,
        &policy,
        0.0,
        x0,
        &Belief::new([0.2]).unwrap(),
        &sde_cfg(200, 1, h),
    )
    .unwrap();
    let exact = x0 * (r * 1.0f64).exp();
    assert!((s.mean_xt - exact).abs() <= r * r * 1.0 * h * x0);
    assert_abs_diff_eq!(s.var_xt, 0.0, epsilon = 1e-24);
    assert_eq!(s.boundary_hits, 0.0);
}

#[test]
fn pure_bond_chain_mean_is_discrete_compounding() {
    let model = RegimeModel {
        cost_coeff: 0.0,
        horizon: 1.0,
        ..RegimeModel::illustrative()
    };
    let lat = lattice(&model, 0.5, 0.01, 60.0);
    let grid = single_control(ControlPoint::new([0.0], model.attention_min));
    let fields = solve(&model, &lat, &grid).unwrap();
    let start = lat.nearest(1.0, &[0.5]);
    let compounded = (1.0 + 0.03 * 0.01f64).powi(100);
    assert_abs_diff_eq!(fields.g[0][start], compounded, epsilon = 1e-12);
    let occ = occupancy(&model, &lat, &grid, &fields, 0, start).unwrap();
    assert_abs_diff_eq!(occ.terminal_mean, compounded, epsilon = 1e-12);
    let s = simulate_chain(&model, &lat, &grid, &fields, 0, start, 20_000, 5).unwrap();
    assert!((s.mean_xt - compounded).abs() <= 3.0 * s.se_mean);
}

#[test]
fn frozen_dynamics_leave_wealth_unchanged() {
    let model = frozen_market();
    let policy = ConstantPolicy(ControlPoint::new([0.0], 0.5));
    let (paths, hits) = simulate_sde_paths(
        &model,
        &policy,
        0.0,
        1.0,
        &Belief::new([0.5]).unwrap(),
        &sde_cfg(100, 3, 0.01),
    )
    .unwrap();
    assert!(paths.iter().all(|&x| x == 1.0));
    assert_eq!(hits, 0);

    let lat = lattice(&model, 0.5, 0.01, 2.0);
    let grid = single_control(ControlPoint::new([0.0], 0.5));
    let fields = solve(&model, &lat, &grid).unwrap();
    let start = lat.nearest(1.0, &[0.5]);
    let (paths, hits) =
        simulate_chain_paths(&model, &lat, &grid, &fields, 0, start, 100, 3).unwrap();
    assert!(paths.iter().all(|&x| x == 1.0));
    assert_eq!(hits, 0);
}

#[test]
fn single_step_chain_matches_worked_stencil_mean() {
    let model = worked_market(0.001);
    let lat = lattice(&model, 0.2, 0.001, 4.0);
    assert_eq!(lat.spec().n_steps, 1);
    let grid = single_control(ControlPoint::new([1.0], 1.0));
    let fields = solve(&model, &lat, &grid).unwrap();
    let start = lat.nearest(2.0, &[0.2]);
    let occ = occupancy(&model, &lat, &grid, &fields, 0, start).unwrap();
    assert_abs_diff_eq!(occ.terminal_mean - 2.0, 0.0001, epsilon = 1e-15);
    assert_abs_diff_eq!(fields.g[0][start] - 2.0, 0.0001, epsilon = 1e-15);
    let s = simulate_chain(&model, &lat, &grid, &fields, 0, start, 200_000, 11).unwrap();
    assert!((s.mean_xt - 2.0 - 0.0001).abs() <= 3.0 * s.se_mean, "{s:?}");
}

#[test]
fn simulations_are_reproducible_by_seed() {
    let model = RegimeModel {
        horizon: 0.1,
        ..RegimeModel::illustrative()
    };
    let policy = ConstantPolicy(ControlPoint::new([1.0], 1.0));
    let b0 = Belief::new([0.4]).unwrap();
    let run = |seed| {
        simulate_sde_paths(&model, &policy, 0.0, 1.0, &b0, &sde_cfg(500, seed, 0.001)).unwrap()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42).0, run(43).0);

    let lat = lattice(&model, 0.2, 0.001, 4.0);
    let grid = ControlGrid::uniform(&model, 2.0, 1.0, 3).unwrap();
    let fields = solve(&model, &lat, &grid).unwrap();
    let start = lat.nearest(1.0, &[0.4]);
    let chain =
        |seed| simulate_chain_paths(&model, &lat, &grid, &fields, 0, start, 500, seed).unwrap();
    assert_eq!(chain(42), chain(42));
    assert_ne!(chain(42).0, chain(43).0);
}

#[test]
fn chain_mean_matches_g_on_a_coarse_grid() {
    let model = RegimeModel {
        horizon: 0.5,
        ..RegimeModel::illustrative()
    };
    let lat = lattice(&model, 0.2, 0.005, 4.0);
    let grid = ControlGrid::uniform(&model, 4.0, 0.5, 5).unwrap();
    let fields = solve(&model, &lat, &grid).unwrap();
    let start = lat.nearest(2.0, &[0.2]);
    let s = simulate_chain(&model, &lat, &grid, &fields, 0, start, 50_000, 99).unwrap();
    assert!(
        (s.mean_xt - fields.g[0][start]).abs() <= 3.0 * s.se_mean,
        "{s:?}"
    );
    let occ = occupancy(&model, &lat, &grid, &fields, 0, start).unwrap();
    assert_abs_diff_eq!(occ.terminal_mean, fields.g[0][start], epsilon = 1e-12);
}

#[test]
fn boundary_hits_are_counted() {
    let model = RegimeModel {
        horizon: 1.0,
        ..RegimeModel::illustrative()
    };
    let policy = ConstantPolicy(ControlPoint::new([4.0], 1.0));
    let cfg = SdeConfig {
        x_min: 0.9,
        x_max: 1.1,
        ..sde_cfg(2_000, 8, 0.01)
    };
    let s = simulate_sde(
        &model,
        &policy,
        0.0,
        1.0,
        &Belief::new([0.2]).unwrap(),
        &cfg,
    )
    .unwrap();
    assert!(s.boundary_hits > 0.5);

    let lat = lattice(&model, 0.2, 0.01, 0.4);
    let grid = single_control(ControlPoint::new([4.0], 1.0));
    let fields = solve(&model, &lat, &grid).unwrap();
    let s = simulate_chain(
        &model,
        &lat,
        &grid,
        &fields,
        0,
        lat.nearest(0.2, &[0.2]),
        2_000,
        8,
    )
    .unwrap();
    assert!(s.boundary_hits > 0.5);
}

#[test]
fn marginal_oracle_recovers_symmetric_chain() {
    let mut model = RegimeModel::illustrative();
    model.generator = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
    let r = marginal_check(&model, &Belief::vertex(2, 0), 1.0, 0.5, 20_000, 17, 0.001).unwrap();
    assert_abs_diff_eq!(r.target[0], 0.68394, epsilon = 1e-5);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn bad_starts_are_domain_errors() {
    let model = RegimeModel::illustrative();
    let lat = lattice(&model, 0.2, 0.01, 1.0);
    let grid = single_control(ControlPoint::new([0.0], 1.0));
    let fields = SolutionFields::terminal(&lat);
    assert!(simulate_chain(&model, &lat, &grid, &fields, 0, lat.len(), 10, 1).is_err());
    assert!(simulate_chain(&model, &lat, &grid, &fields, 0, 0, 1, 1).is_err());
    assert!(marginal_check(&model, &Belief::vertex(2, 0), 5.0, 0.5, 10, 1, 0.01).is_err());
}
