//! Named example games.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{
    ActionSet, Cooperation, Costs, Diffusion, Drift, GameSpec, InitialLaw, LqCoupling, LqPopulation,
    MeasureContext, Matrix, ModelConstants, ModelError, PopulationSpec, StructuralFlags, Vector,
};

/// Numeric overrides for a builtin, e.g. `coupling = 0.3`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuiltinParams(pub BTreeMap<String, f64>);

impl BuiltinParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.0.get(key).copied().unwrap_or(default)
    }

    fn reject_unknown(&self, name: &str, allowed: &[&str]) -> Result<(), ModelError> {
        for key in self.0.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ModelError::Invalid(format!(
                    "builtin {name:?} has no parameter {key:?} (known: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

type Builder = fn(&BuiltinParams) -> Result<GameSpec, ModelError>;

const BUILTINS: &[(&str, &[&str], Builder)] = &[
    ("lq-1d", &["horizon", "sigma", "q", "qt"], lq_1d),
    ("lq-1d-bimodal", &["horizon", "sigma"], lq_1d_bimodal),
    ("lq-2d", &["horizon", "sigma"], lq_2d),
    ("lq-1pop", &["horizon", "coupling", "mean0"], lq_1pop),
    ("lq-1pop-cooperative", &["horizon", "coupling", "mean0"], lq_1pop_cooperative),
    ("lq-2pop-competitive", &["horizon", "coupling", "mean1", "mean2", "std"], lq_2pop_competitive),
    (
        "lq-2pop-cooperative",
        &["horizon", "own_coupling", "coupling", "mean_drift", "cross_drift"],
        lq_2pop_cooperative,
    ),
    ("mixed-opec", &["horizon", "mu_terms", "cross_drift", "coupling"], mixed_opec),
    ("nonquadratic-box", &["horizon", "coupling", "bound"], nonquadratic_box),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _, _)| *n).collect()
}

/// Builds the named builtin with parameter overrides.
pub fn lookup_builtin(name: &str, params: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let (_, allowed, build) = BUILTINS
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| ModelError::NotFound(name.to_string()))?;
    params.reject_unknown(name, allowed)?;
    build(params)
}

/// Every builtin with default parameters.
pub fn builtin_library() -> Vec<GameSpec> {
    BUILTINS
        .iter()
        .map(|(_, _, build)| build(&BuiltinParams::new()).expect("builtin defaults are valid"))
        .collect()
}

fn s(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

fn gaussian_1d(mean: f64, std: f64) -> InitialLaw {
    InitialLaw::gaussian_iso(Vector::from_element(1, mean), std)
}

fn frob(m: &Matrix) -> f64 {
    m.norm()
}

/// Game built from LQ populations; the declared constants and structural
/// flags are read off the matrices.
pub fn lq_game(name: &str, pops: Vec<LqPopulation>, horizon: f64) -> Result<GameSpec, ModelError> {
    let mut lambda = f64::INFINITY;
    let mut l: f64 = 0.0;
    let mut k: f64 = 0.0;
    for p in &pops {
        let eig = p.r.clone().symmetric_eigen().eigenvalues.min();
        lambda = lambda.min(0.5 * eig);
        let gain = 1.0 + p.measure_gain.abs();
        l = l
            .max(frob(&p.a) * gain)
            .max(frob(&p.b))
            .max(frob(&p.own_mean_drift))
            .max(frob(&p.r))
            .max(frob(&p.q))
            .max(frob(&p.qt))
            .max(frob(&(&p.q * &p.own_target)))
            .max(frob(&(&p.qt * &p.own_target)));
        for c in &p.others {
            l = l
                .max(frob(&c.drift))
                .max(frob(&(&p.q * &c.target)))
                .max(frob(&(&p.qt * &c.target)));
        }
        k = k.max(p.b0.norm()).max(frob(&p.sigma));
    }
    let flags = lq_flags(&pops);
    let populations = pops
        .iter()
        .enumerate()
        .map(|(i, p)| p.to_population(format!("{name}[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    GameSpec::new(name, populations, horizon, ModelConstants::new(l, lambda, k)?, flags)
}

fn lq_flags(pops: &[LqPopulation]) -> StructuralFlags {
    let a1 = |p: &LqPopulation| p.measure_gain == 0.0;
    let b0_free = |p: &LqPopulation| {
        p.others.iter().all(|c| c.drift.iter().all(|v| *v == 0.0))
            && (p.cooperation == Cooperation::Cooperative || p.own_mean_drift.iter().all(|v| *v == 0.0))
    };
    let competitive: Vec<&LqPopulation> = pops.iter().filter(|p| p.cooperation == Cooperation::Competitive).collect();
    let cooperative: Vec<&LqPopulation> = pops.iter().filter(|p| p.cooperation == Cooperation::Cooperative).collect();
    let mfg_fa_a1 = competitive.iter().all(|p| a1(p));
    let mftc_fa_a1 = cooperative.iter().all(|p| a1(p));
    let mftc_fa_b = mftc_fa_a1 && cooperative.iter().all(|p| b0_free(p));
    let mftc_mfg_fa_b = pops.len() == 2
        && pops[0].cooperation == Cooperation::Cooperative
        && pops[1].cooperation == Cooperation::Competitive
        && a1(&pops[0])
        && a1(&pops[1])
        && pops[1].others.iter().all(|c| c.drift.iter().all(|v| *v == 0.0));
    StructuralFlags {
        mfg_fa_a1,
        mftc_fa_a1,
        mftc_fa_b,
        mftc_mfg_fa_b,
    }
}

fn lq_1d(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let pop = LqPopulation::scalar(p.get("q", 1.0), p.get("qt", 1.0), p.get("sigma", 1.0), gaussian_1d(0.0, 1.0));
    lq_game("lq-1d", vec![pop], p.get("horizon", 1.0))
}

fn lq_1d_bimodal(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let lobe = |c: f64| InitialLaw::Uniform {
        lower: Vector::from_element(1, c - 0.1),
        upper: Vector::from_element(1, c + 0.1),
    };
    let law = InitialLaw::Mixture(vec![(0.5, lobe(-1.0)), (0.5, lobe(1.0))]);
    let pop = LqPopulation::scalar(1.0, 1.0, p.get("sigma", 0.3), law);
    lq_game("lq-1d-bimodal", vec![pop], p.get("horizon", 1.0))
}

fn lq_2d(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let id = Matrix::identity(2, 2);
    let pop = LqPopulation {
        a: Matrix::zeros(2, 2),
        b: id.clone(),
        b0: Vector::zeros(2),
        own_mean_drift: Matrix::zeros(2, 2),
        sigma: &id * p.get("sigma", 1.0),
        r: id.clone(),
        q: id.clone(),
        qt: id.clone(),
        own_target: Matrix::zeros(2, 2),
        others: Vec::new(),
        measure_gain: 0.0,
        cooperation: Cooperation::Competitive,
        initial_law: InitialLaw::gaussian_iso(Vector::zeros(2), 1.0),
        actions: None,
    };
    lq_game("lq-2d", vec![pop], p.get("horizon", 1.0))
}

fn one_pop_coupled(p: &BuiltinParams, cooperation: Cooperation, name: &str) -> Result<GameSpec, ModelError> {
    let mut pop = LqPopulation::scalar(1.0, 1.0, 1.0, gaussian_1d(p.get("mean0", 1.0), 0.5));
    pop.own_target = s(p.get("coupling", 0.5));
    pop.cooperation = cooperation;
    lq_game(name, vec![pop], p.get("horizon", 1.0))
}

fn lq_1pop(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    one_pop_coupled(p, Cooperation::Competitive, "lq-1pop")
}

fn lq_1pop_cooperative(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    one_pop_coupled(p, Cooperation::Cooperative, "lq-1pop-cooperative")
}

fn lq_2pop_competitive(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let c = p.get("coupling", 0.5);
    let std = p.get("std", 0.5);
    let make = |mean: f64| {
        let mut pop = LqPopulation::scalar(1.0, 1.0, 1.0, gaussian_1d(mean, std));
        pop.others = vec![LqCoupling {
            drift: s(0.0),
            target: s(c),
        }];
        pop
    };
    lq_game(
        "lq-2pop-competitive",
        vec![make(p.get("mean1", 1.0)), make(p.get("mean2", -0.5))],
        p.get("horizon", 1.0),
    )
}

fn lq_2pop_cooperative(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let own = p.get("own_coupling", 0.3);
    let c = p.get("coupling", 0.5);
    let mean_drift = p.get("mean_drift", 0.2);
    let cross = p.get("cross_drift", 0.0);
    let make = |mean: f64| {
        let mut pop = LqPopulation::scalar(1.0, 1.0, 1.0, gaussian_1d(mean, 0.5));
        pop.cooperation = Cooperation::Cooperative;
        pop.own_mean_drift = s(mean_drift);
        pop.own_target = s(own);
        pop.others = vec![LqCoupling {
            drift: s(cross),
            target: s(c),
        }];
        pop
    };
    lq_game("lq-2pop-cooperative", vec![make(1.0), make(-0.5)], p.get("horizon", 1.0))
}

fn mixed_opec(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let mu = p.get("mu_terms", 1.0);
    let mut cartel = LqPopulation::scalar(1.0, 1.0, 1.0, gaussian_1d(1.0, 0.5));
    cartel.cooperation = Cooperation::Cooperative;
    cartel.own_mean_drift = s(0.1 * mu);
    cartel.own_target = s(0.3 * mu);
    cartel.others = vec![LqCoupling {
        drift: s(p.get("cross_drift", 0.1)),
        target: s(0.2),
    }];
    let mut fringe = LqPopulation::scalar(1.0, 1.0, 1.0, gaussian_1d(0.0, 0.5));
    fringe.others = vec![LqCoupling {
        drift: s(0.0),
        target: s(p.get("coupling", 0.5)),
    }];
    lq_game("mixed-opec", vec![cartel, fringe], p.get("horizon", 1.0))
}

/// `log cosh a` without overflow.
pub(crate) fn log_cosh(a: f64) -> f64 {
    let b = a.abs();
    b + (-2.0 * b).exp().ln_1p() - std::f64::consts::LN_2
}

fn nonquadratic_box(p: &BuiltinParams) -> Result<GameSpec, ModelError> {
    let c = p.get("coupling", 0.3);
    let bound = p.get("bound", 1.0);
    let target = move |ctx: &MeasureContext| c * ctx.own.mean()[0];
    let f = Arc::new(move |ctx: &MeasureContext, x: &Vector, a: &Vector| {
        let e = x[0] - target(ctx);
        0.5 * e * e + 0.5 * a[0] * a[0] + log_cosh(a[0])
    });
    let df_dx = Arc::new(move |ctx: &MeasureContext, x: &Vector, _a: &Vector| Vector::from_element(1, x[0] - target(ctx)));
    let df_dalpha = Arc::new(|_: &MeasureContext, _x: &Vector, a: &Vector| Vector::from_element(1, a[0] + a[0].tanh()));
    let g = Arc::new(move |ctx: &MeasureContext, x: &Vector| {
        let e = x[0] - target(ctx);
        0.5 * e * e
    });
    let dg_dx = Arc::new(move |ctx: &MeasureContext, x: &Vector| Vector::from_element(1, x[0] - target(ctx)));
    let pop = PopulationSpec {
        name: "nonquadratic-box[0]".into(),
        state_dim: 1,
        drift: Drift::constant(Vector::zeros(1), s(0.0), s(1.0)),
        diffusion: Diffusion::additive(s(0.5)),
        costs: Costs {
            f,
            df_dx,
            df_dalpha,
            g,
            dg_dx,
            df_dmu: None,
            dg_dmu: None,
            quadratic: None,
        },
        actions: ActionSet::boxed(Vector::from_element(1, -bound), Vector::from_element(1, bound))?,
        cooperation: Cooperation::Competitive,
        initial_law: gaussian_1d(0.5, 0.5),
        lq: None,
    };
    let flags = StructuralFlags {
        mfg_fa_a1: true,
        mftc_fa_a1: true,
        mftc_fa_b: true,
        mftc_mfg_fa_b: false,
    };
    GameSpec::new(
        "nonquadratic-box",
        vec![pop],
        p.get("horizon", 1.0),
        ModelConstants::new(2.0_f64.max(c), 0.5, 0.5)?,
        flags,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_covers_required_shapes() {
        let lib = builtin_library();
        assert!(lib.len() >= 5);
        let comp = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
        assert_eq!(comp.n_populations(), 2);
        assert_eq!(comp.state_dim(), 1);
        assert!(comp.populations.iter().all(|p| p.control_dim() == 1 && !p.is_cooperative()));
        let mixed = lookup_builtin("mixed-opec", &BuiltinParams::new()).unwrap();
        assert!(mixed.populations[0].is_cooperative());
        assert!(!mixed.populations[1].is_cooperative());
        assert!(mixed.flags.mftc_mfg_fa_b);
        let coop = lookup_builtin("lq-2pop-cooperative", &BuiltinParams::new()).unwrap();
        assert!(coop.all_cooperative() && coop.flags.mftc_fa_b);
        assert!(coop.populations[0].drift.b1_bar.is_some());
        let nq = lookup_builtin("nonquadratic-box", &BuiltinParams::new()).unwrap();
        assert!(nq.populations[0].costs.quadratic.is_none());
    }

    #[test]
    fn unknown_names_and_parameters_are_rejected() {
        assert!(matches!(
            lookup_builtin("no-such-model", &BuiltinParams::new()),
            Err(ModelError::NotFound(_))
        ));
        assert!(matches!(
            lookup_builtin("lq-1d", &BuiltinParams::new().with("bogus", 1.0)),
            Err(ModelError::Invalid(_))
        ));
    }

    #[test]
    fn cross_drift_breaks_the_strong_cooperative_flag() {
        let spec = lookup_builtin("lq-2pop-cooperative", &BuiltinParams::new().with("cross_drift", 0.3)).unwrap();
        assert!(spec.flags.mftc_fa_a1);
        assert!(!spec.flags.mftc_fa_b);
    }

    #[test]
    fn log_cosh_is_stable() {
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }
}
