use std::sync::Arc;

use approx::assert_abs_diff_eq;

use super::*;
use crate::model::{
    lookup_builtin, ActionSet, BuiltinParams, Costs, Diffusion, Drift, InitialLaw, ModelConstants, PopulationSpec,
    StructuralFlags,
};

fn small_cfg(n: usize) -> SolverConfig {
    SolverConfig {
        steps: 20,
        n_paths: n,
        ..SolverConfig::default()
    }
}

fn flows_for(spec: &GameSpec, cfg: &SolverConfig) -> Vec<MeasureFlow> {
    initial_flows(spec, &cfg.grid(spec.horizon).unwrap(), 64, 0)
}

/// `b = 1 + 0.3 x + α`, `f = |α|²`, `g = 0`, no state cost.
fn zero_cost_game() -> GameSpec {
    let pop = PopulationSpec {
        name: "zero".into(),
        state_dim: 1,
        drift: Drift::constant(Vector::from_element(1, 1.0), Matrix::from_element(1, 1, 0.3), Matrix::identity(1, 1)),
        diffusion: Diffusion::additive(Matrix::identity(1, 1)),
        costs: Costs {
            f: Arc::new(|_, _, a| a.norm_squared()),
            df_dx: Arc::new(|_, x: &Vector, _| Vector::zeros(x.len())),
            df_dalpha: Arc::new(|_, _, a: &Vector| a * 2.0),
            g: Arc::new(|_, _| 0.0),
            dg_dx: Arc::new(|_, x: &Vector| Vector::zeros(x.len())),
            df_dmu: None,
            dg_dmu: None,
            quadratic: None,
        },
        actions: ActionSet::full(1),
        cooperation: Cooperation::Competitive,
        initial_law: InitialLaw::gaussian_iso(Vector::zeros(1), 1.0),
        lq: None,
    };
    GameSpec::new("zero", vec![pop], 1.0, ModelConstants::new(1.0, 1.0, 1.0).unwrap(), StructuralFlags::default())
        .unwrap()
}

#[test]
fn zero_cost_model_has_zero_adjoint_and_control() {
    let spec = zero_cost_game();
    let cfg = small_cfg(128);
    let flows = flows_for(&spec, &cfg);
    let sol = solve_adjoint_competitive(&spec, 0, &flows, &cfg, 3).unwrap();
    assert!(sol.y.iter().flatten().all(|v| *v == 0.0));
    assert!(sol.alpha.iter().flatten().all(|v| *v == 0.0));
    let laws = FrozenLaws::new(flows);
    let cost = optimal_cost(&sol, &spec, 0, &laws).unwrap();
    assert_eq!(cost, CostEstimate { mean: 0.0, std_error: 0.0 });
}

#[test]
fn deterministic_unit_running_cost_integrates_to_horizon() {
    let mut spec = zero_cost_game();
    let pop = &mut spec.populations[0];
    pop.diffusion = Diffusion::additive(Matrix::zeros(1, 1));
    pop.initial_law = InitialLaw::PointMass(Vector::zeros(1));
    pop.costs.f = Arc::new(|_, _, _| 1.0);
    pop.costs.df_dalpha = Arc::new(|_, _, a: &Vector| Vector::zeros(a.len()));
    let cfg = small_cfg(8);
    let flows = flows_for(&spec, &cfg);
    let sol = solve_adjoint_competitive(&spec, 0, &flows, &cfg, 1).unwrap();
    let cost = optimal_cost(&sol, &spec, 0, &FrozenLaws::new(flows)).unwrap();
    assert_abs_diff_eq!(cost.mean, 1.0, epsilon = 1e-12);
    assert_eq!(cost.std_error, 0.0);
}

#[test]
fn measure_free_solution_ignores_the_frozen_flows() {
    let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
    let cfg = small_cfg(256);
    let flows = flows_for(&spec, &cfg);
    let shifted: Vec<MeasureFlow> = flows
        .iter()
        .map(|f| f.map_clouds(|_, c| Ok(c.shifted(&Vector::from_element(1, 3.7)))).unwrap())
        .collect();
    let a = solve_adjoint_competitive(&spec, 0, &flows, &cfg, 9).unwrap();
    let b = solve_adjoint_competitive(&spec, 0, &shifted, &cfg, 9).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
    assert_eq!(a.picard_history, b.picard_history);
}

#[test]
fn solvers_reject_the_wrong_cooperation_flag() {
    let spec = lookup_builtin("lq-1pop-cooperative", &BuiltinParams::new()).unwrap();
    let cfg = small_cfg(16);
    let flows = flows_for(&spec, &cfg);
    assert!(matches!(
        solve_adjoint_competitive(&spec, 0, &flows, &cfg, 0),
        Err(FbsdeError::Cooperation { .. })
    ));
    let comp = lookup_builtin("lq-1pop", &BuiltinParams::new()).unwrap();
    assert!(matches!(
        solve_adjoint_mkv(&comp, 0, &flows, &cfg, 0),
        Err(FbsdeError::Cooperation { .. })
    ));
}

#[test]
fn mkv_solver_reduces_to_competitive_without_measure_terms() {
    let p = BuiltinParams::new().with("coupling", 0.0);
    let coop = lookup_builtin("lq-1pop-cooperative", &p).unwrap();
    let comp = lookup_builtin("lq-1pop", &p).unwrap();
    let cfg = small_cfg(256);
    let flows = flows_for(&comp, &cfg);
    let a = solve_adjoint_competitive(&comp, 0, &flows, &cfg, 4).unwrap();
    let b = solve_adjoint_mkv(&coop, 0, &flows, &cfg, 4).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
    assert_eq!(a.z, b.z);
    assert_eq!(a.alpha, b.alpha);
}

#[test]
fn single_particle_terminal_adjoint_is_the_state() {
    let p = BuiltinParams::new().with("coupling", 0.0);
    let coop = lookup_builtin("lq-1pop-cooperative", &p).unwrap();
    let cfg = small_cfg(1);
    let flows = flows_for(&coop, &cfg);
    let sol = solve_adjoint_mkv(&coop, 0, &flows, &cfg, 2).unwrap();
    let last = cfg.steps;
    assert_eq!(sol.y[last], sol.x[last]);
}

#[test]
fn mean_field_control_matches_mean_variance_decomposition() {
    let spec = lookup_builtin("lq-1pop-cooperative", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig {
        steps: 25,
        n_paths: 2048,
        ..SolverConfig::default()
    };
    let flows = flows_for(&spec, &cfg);
    let sol = solve_adjoint_mkv(&spec, 0, &flows, &cfg, 11).unwrap();
    let grid = sol.grid;
    let oracle = mftc_scalar(1.0, 1.0, 0.5, 1.0, &grid).unwrap();
    for k in 0..grid.knots() {
        let m = sol.cloud(k).mean()[0];
        assert!((m - oracle.mean[k]).abs() < 0.05, "mean at knot {k}: {m} vs {}", oracle.mean[k]);
        let slope = sol.field.slope_at_center(k)[(0, 0)];
        assert!((slope - oracle.p[k]).abs() < 0.05, "slope at knot {k}: {slope} vs {}", oracle.p[k]);
        let ey: f64 = sol.y[k].iter().sum::<f64>() / sol.n_paths as f64;
        assert!((ey - oracle.r[k] * m).abs() < 0.05, "E[Y] at knot {k}");
    }
}

#[test]
fn null_perturbation_has_zero_gap_and_sign_flip_costs_more() {
    let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
    let cfg = small_cfg(512);
    let flows = flows_for(&spec, &cfg);
    let laws = FrozenLaws::new(flows.clone());
    let sol = solve_adjoint_competitive(&spec, 0, &flows, &cfg, 5).unwrap();
    let zero = deviation_gap(&spec, 0, &laws, &sol, &Perturbation::Constant { shift: vec![0.0] }).unwrap();
    assert_eq!(zero.gap, 0.0);
    assert_eq!(zero.std_error, 0.0);

    let shift = deviation_gap(&spec, 0, &laws, &sol, &Perturbation::Constant { shift: vec![0.1] }).unwrap();
    let lambda = spec.constants.convexity_lambda;
    assert!(shift.cost_difference >= lambda * 0.01 * spec.horizon - (3.0 * shift.std_error + SUFFICIENCY_BIAS_TOL));

    let flip = deviation_gap(&spec, 0, &laws, &sol, &Perturbation::SignFlip).unwrap();
    assert!(flip.gap > 3.0 * flip.std_error);
}

#[test]
fn off_flow_master_field_evaluation_is_rejected() {
    let spec = lookup_builtin("lq-1pop-cooperative", &BuiltinParams::new()).unwrap();
    let cfg = small_cfg(128);
    let flows = flows_for(&spec, &cfg);
    let sol = solve_adjoint_mkv(&spec, 0, &flows, &cfg, 1).unwrap();
    let x = Vector::from_element(1, 0.3);
    assert!(sol.field.is_master());
    assert!(sol.field.eval_master(4, &x, &sol.cloud(4)).is_ok());
    let other = sol.cloud(4).shifted(&Vector::from_element(1, 0.5));
    assert!(matches!(sol.field.eval_master(4, &x, &other), Err(FbsdeError::OffFlow { knot: 4 })));
}

#[test]
fn picard_reports_non_convergence_with_history() {
    let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig {
        max_picard: 2,
        picard_tol: 1e-14,
        ..small_cfg(64)
    };
    let flows = flows_for(&spec, &cfg);
    match solve_adjoint_competitive(&spec, 0, &flows, &cfg, 0) {
        Err(FbsdeError::NonConvergence { history, .. }) => assert_eq!(history.len(), 2),
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn degenerate_initial_law_is_handled() {
    let mut spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
    spec.populations[0].initial_law = InitialLaw::PointMass(Vector::from_element(1, 0.5));
    let cfg = small_cfg(256);
    let flows = flows_for(&spec, &cfg);
    let sol = solve_adjoint_competitive(&spec, 0, &flows, &cfg, 0).unwrap();
    assert_eq!(sol.field.fit(0).features.len(), 1);
    // P ≡ 1, so Y_0 = X_0
    assert!((sol.y[0][0] - 0.5).abs() < 0.05);
}
