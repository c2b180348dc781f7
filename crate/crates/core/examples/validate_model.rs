//! Audits every builtin game: declared constants, convexity and the
//! structural flags the finite-agent modes rely on.

use meanfield::model::{builtin_library, validate_game};

fn main() {
    for spec in builtin_library() {
        let report = validate_game(&spec, 128, 0).expect("validation runs");
        println!("{:<22} {}", spec.name, if report.passed() { "ok" } else { "FAILED" });
        for c in &report.checks {
            let who = c.population.map(|i| format!("[{i}]")).unwrap_or_default();
            println!("    {:<5} {}{who}: residual {:.2e}", if c.passed { "pass" } else { "fail" }, c.name, c.worst_residual);
        }
    }
}
