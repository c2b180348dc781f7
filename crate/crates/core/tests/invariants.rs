use std::path::Path;

use proptest::prelude::*;
use rand::Rng;

use meanfield::cli::{ExperimentConfig, Seed};
use meanfield::hamiltonian::KnotHamiltonian;
use meanfield::measures::{sliced_w2, ParticleCloud};
use meanfield::model::{builtin_library, MeasureContext, Vector};
use meanfield::rng::SeedStream;

fn clouds(d: usize, m: usize, shift: f64) -> Vec<ParticleCloud> {
    (0..m)
        .map(|j| {
            let pts = (0..6 * d).map(|p| shift + 0.3 * (p as f64 - 2.5) + j as f64 * 0.1).collect();
            ParticleCloud::new(d, pts).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minimizer_beats_every_feasible_action(
        which in 0usize..64,
        x0 in -3.0f64..3.0,
        y0 in -3.0f64..3.0,
        shift in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let library = builtin_library();
        let spec = &library[which % library.len()];
        let d = spec.state_dim();
        let cl = clouds(d, spec.n_populations(), shift);
        let refs: Vec<&ParticleCloud> = cl.iter().collect();
        let i = which % spec.n_populations();
        let pop = &spec.populations[i];
        let h = KnotHamiltonian::new(pop, MeasureContext::for_population(0.5 * spec.horizon, i, &refs), None, spec.constants).unwrap();
        let x = Vector::from_element(d, x0);
        let y = Vector::from_fn(d, |k, _| y0 * (1.0 + k as f64));
        let a = h.minimize(&x, &y).unwrap();
        let best = h.reduced(&x, &y, &a).unwrap();
        let mut rng = SeedStream::new(seed).rng();
        for _ in 0..16 {
            let b = pop.actions.sample(&mut rng, 3.0);
            prop_assert!(best <= h.reduced(&x, &y, &b).unwrap() + 1e-9 * (1.0 + best.abs()));
        }
        let slow = h.minimize_iterative(&x, &y).unwrap();
        prop_assert!((&a - &slow).norm() <= 1e-6 * (1.0 + a.norm()));
    }

    #[test]
    fn seed_tree_is_a_pure_function(master in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        let s = SeedStream::new(master).named("paths");
        prop_assert_eq!(s.index(a).value(), SeedStream::new(master).named("paths").index(a).value());
        if a != b {
            prop_assert_ne!(s.index(a).value(), s.index(b).value());
        }
        prop_assert_ne!(s.value(), SeedStream::new(master).named("copies").value());
        let mut r1 = s.index(a).rng();
        let mut r2 = s.index(a).rng();
        prop_assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn resolved_config_round_trips(seed in any::<u64>(), steps in 2usize..200, paths in 1usize..100_000, which in 0usize..64) {
        let library = builtin_library();
        let mut cfg = ExperimentConfig::for_builtin(&library[which % library.len()].name);
        cfg.seed = Seed(seed);
        cfg.solver.steps = steps;
        cfg.solver.n_paths = paths;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::parse(&text, Path::new(".")).unwrap(), cfg);
    }

    #[test]
    fn sliced_w2_is_symmetric_and_translation_covariant(
        pts in prop::collection::vec(-4.0f64..4.0, 2..24),
        dx in -2.0f64..2.0,
        dy in -2.0f64..2.0,
    ) {
        let n = pts.len() / 2;
        let a = ParticleCloud::new(2, pts[..2 * n].to_vec()).unwrap();
        let shift = Vector::from_vec(vec![dx, dy]);
        let b = a.shifted(&shift);
        let ab = sliced_w2(&a, &b, 64, 3).unwrap();
        prop_assert!((ab - sliced_w2(&b, &a, 64, 3).unwrap()).abs() <= 1e-12);
        prop_assert!(sliced_w2(&a, &a, 64, 3).unwrap() <= 1e-12);
        // a pure translation moves every projection by ⟨θ, shift⟩, so the sliced distance stays below |shift|
        prop_assert!(ab <= shift.norm() + 1e-12);
    }
}
