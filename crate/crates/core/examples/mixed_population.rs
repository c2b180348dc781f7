//! A cooperative cartel facing a competitive fringe: both mixed-game
//! deviation setups.

use meanfield::fbsde::SolverConfig;
use meanfield::fixedpoint::{solve_matching, FixedPointConfig};
use meanfield::model::{lookup_builtin, BuiltinParams};
use meanfield::nagent::{nash_gap, NashMode, NashOptions};

fn main() {
    let spec = lookup_builtin("mixed-opec", &BuiltinParams::new()).unwrap();
    let cfg = SolverConfig { steps: 25, n_paths: 2048, ..SolverConfig::default() };
    let eq = solve_matching(&spec, &cfg, &FixedPointConfig::default(), 1).unwrap();
    for (i, c) in eq.costs.iter().enumerate() {
        println!("population {i} ({:?}): cost {:.4}", spec.populations[i].cooperation, c.mean);
    }
    for mode in [NashMode::MixedSetup1, NashMode::MixedSetup2] {
        let opts = NashOptions { mode, sizes: vec![8, 32, 128], ..NashOptions::default() };
        let r = nash_gap(&spec, &eq, &opts, 2).unwrap();
        let worst = r.gains.iter().map(|g| g.gain).fold(f64::INFINITY, f64::min);
        println!("{}: smallest gain {worst:+.3e}, κ ratio {:.2}", mode.label(), r.kappa_ratio);
    }
}
