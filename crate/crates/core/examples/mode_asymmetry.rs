//! The same dynamics solved as a Nash game and as a control problem: the
//! cooperative population internalizes its effect on the law. With the
//! target c·m the correction is proportional to c(1 − c)·m, so the two
//! coincide at c = 0 and c = 1.

use meanfield::fbsde::SolverConfig;
use meanfield::fixedpoint::{solve_matching, FixedPointConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};

fn main() {
    let cfg = SolverConfig { steps: 25, n_paths: 2048, ..SolverConfig::default() };
    for coupling in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let params = BuiltinParams::new().with("coupling", coupling);
        let mut costs = Vec::new();
        for name in ["lq-1pop", "lq-1pop-cooperative"] {
            let spec = lookup_builtin(name, &params).unwrap();
            let eq = solve_matching(&spec, &cfg, &FixedPointConfig::default(), 5).unwrap();
            costs.push(eq.costs[0].mean);
        }
        println!(
            "coupling {coupling:.2}: Nash cost {:.4}, control cost {:.4}, price of anarchy {:.4}",
            costs[0],
            costs[1],
            costs[0] - costs[1]
        );
    }
}
