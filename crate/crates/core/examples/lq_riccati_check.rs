//! Compares the regression slope of the decoupling field with the Riccati
//! solution of a scalar LQ problem.

use meanfield::fbsde::{initial_flows, solve_adjoint, solve_lq_riccati, FrozenLaws, LqSpec, SolverConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};

fn main() {
    let spec = lookup_builtin("lq-1d", &BuiltinParams::new().with("qt", 0.5)).unwrap();
    let cfg = SolverConfig { steps: 50, n_paths: 4096, ..SolverConfig::default() };
    let grid = cfg.grid(spec.horizon).unwrap();
    let laws = FrozenLaws::new(initial_flows(&spec, &grid, 64, 0));
    let sol = solve_adjoint(&spec, 0, &laws, &cfg, 1, None).unwrap();
    let ric = solve_lq_riccati(&LqSpec::from_population(&spec.populations[0]).unwrap(), &grid).unwrap();
    println!("{:>6} {:>10} {:>10} {:>10}", "t", "riccati", "slope", "rel.err");
    for k in (0..grid.knots()).step_by(5) {
        let p = ric.p_knot(k)[(0, 0)];
        let s = sol.field.slope_at_center(k)[(0, 0)];
        println!("{:>6.2} {p:>10.5} {s:>10.5} {:>10.2e}", grid.time(k), ((s - p) / p).abs());
    }
}
