//! Propagation of chaos: distance between the empirical law of N
//! interacting particles and the equilibrium law, on a log-log scale.

use meanfield::fbsde::SolverConfig;
use meanfield::fixedpoint::{solve_matching, FixedPointConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};
use meanfield::nagent::{chaos_rate, ChaosOptions};

fn main() {
    let spec = lookup_builtin("lq-1d-bimodal", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig { steps: 25, n_paths: 2048, ..SolverConfig::default() };
    let eq = solve_matching(&spec, &cfg, &FixedPointConfig::default(), 1).unwrap();
    let opts = ChaosOptions { sizes: vec![16, 64, 256, 1024], repetitions: 16, ..ChaosOptions::default() };
    let report = chaos_rate(&spec, &eq, &opts, 2).unwrap();
    for p in &report.points {
        println!("N = {:>5}: E W2² = {:.3e} ± {:.1e}", p.n, p.estimate, p.std_error);
    }
    match report.fit {
        Some(fit) => println!("slope {:.3} (theory {:.2}), R² {:.3}", fit.slope, report.theory_slope, fit.r_squared),
        None => println!("no fit"),
    }
}
