//! Solves the matching problem of a two-population competitive game and
//! compares the equilibrium means with the coupled scalar ODE.

use meanfield::fbsde::{coupled_scalar_means, SolverConfig};
use meanfield::fixedpoint::{solve_matching, FixedPointConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};

fn main() {
    let spec = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig { steps: 50, n_paths: 2048, ..SolverConfig::default() };
    let eq = solve_matching(&spec, &cfg, &FixedPointConfig::default(), 7).unwrap();
    for r in &eq.history {
        println!("update {:>2}: delta {:.3e}", r.iteration, r.delta);
    }
    println!("converged: {} after {} updates", eq.converged, eq.iterations);
    if let Some(theta) = eq.contraction_ratio(2) {
        println!("contraction ratio ≈ {theta:.3}");
    }
    let grid = cfg.grid(spec.horizon).unwrap();
    let pops: Vec<_> = spec.populations.iter().collect();
    let ode = coupled_scalar_means(&pops, &grid).unwrap();
    for (i, flow) in eq.flows.iter().enumerate() {
        let last = grid.knots() - 1;
        println!(
            "population {i}: E[X_T] = {:.4} (ODE {:.4}), cost {:.4} ± {:.4}",
            flow.at(last).mean()[0],
            ode[i][last],
            eq.costs[i].mean,
            eq.costs[i].std_error
        );
    }
}
