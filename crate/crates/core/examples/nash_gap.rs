//! Deviation gains of a single agent in the N-player competitive game.

use meanfield::fbsde::SolverConfig;
use meanfield::fixedpoint::{solve_matching, FixedPointConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};
use meanfield::nagent::{nash_gap, Deviation, NashMode, NashOptions};

fn main() {
    let spec = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig { steps: 25, n_paths: 2048, ..SolverConfig::default() };
    let eq = solve_matching(&spec, &cfg, &FixedPointConfig::default(), 1).unwrap();
    let mut deviations = Deviation::family();
    deviations.push(Deviation::BestResponse);
    let opts = NashOptions { mode: NashMode::Competitive, deviations, sizes: vec![8, 32, 128], ..NashOptions::default() };
    let report = nash_gap(&spec, &eq, &opts, 2).unwrap();
    for g in &report.gains {
        println!("N = {:>4} {:<14} gain {:+.3e} ± {:.1e}", g.n, g.deviation, g.gain, g.std_error);
    }
    println!("κ_N {:?}, ratio {:.2}", report.kappa_per_n, report.kappa_ratio);
}
