//! Equilibria of the φ_n-truncated game for decreasing truncation levels.

use meanfield::fbsde::SolverConfig;
use meanfield::fixedpoint::{solve_matching, truncated_solve, FixedPointConfig};
use meanfield::measures::flow_distance;
use meanfield::model::{lookup_builtin, BuiltinParams};

fn main() {
    let spec = lookup_builtin("lq-1pop", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig { steps: 25, n_paths: 1024, ..SolverConfig::default() };
    let fp = FixedPointConfig::default();
    let plain = solve_matching(&spec, &cfg, &fp, 3).unwrap();
    for level in [1e6, 10.0, 1.0, 0.1, 0.01] {
        let eq = truncated_solve(&spec, level, &cfg, &fp, 3).unwrap();
        let binding: usize = eq.truncation.as_ref().map_or(0, |t| t.binding_knots.iter().map(Vec::len).sum());
        println!(
            "n = {level:>8}: {} binding knots, distance to untruncated {:.3e}, cost {:.4}",
            binding,
            flow_distance(&eq.flows[0], &plain.flows[0]).unwrap(),
            eq.costs[0].mean
        );
    }
}
