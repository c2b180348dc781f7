//! Multi-population game definitions.
//!
//! Every population has affine state coefficients
//!
//! ```text
//! b(t, x, μ, ν, α) = b0 + b1 x + b1_bar μ̄ + b2 α
//! σ(t, x, μ, ν)    = s0 + Σ_l s1[l] x_l + Σ_l s1_bar[l] μ̄_l
//! ```
//!
//! where the matrices may depend on `(t, μ, ν)` and the `_bar` terms are
//! only allowed for cooperative populations. Costs are black-box closures
//! with user-supplied gradients; constants are declared and audited by
//! [`validate_game`].

mod builtins;
mod lq;
mod validate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::measures::ParticleCloud;
use crate::rng::SeedStream;

pub use builtins::{builtin_library, builtin_names, lookup_builtin, lq_game, BuiltinParams};
pub use lq::{LqCoupling, LqPopulation};
pub use validate::{validate_game, CheckResult, Severity, ValidationReport};
pub(crate) use validate::observe_flags;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown builtin model {0:?}")]
    NotFound(String),
    #[error("invalid game: {0}")]
    Invalid(String),
    #[error("coefficient {coefficient} failed at {input}: {reason}")]
    Evaluation {
        coefficient: String,
        input: String,
        reason: String,
    },
}

/// Time and measure arguments seen by a coefficient of population `i`:
/// its own law μ and the laws ν of the other populations, in population order.
#[derive(Clone)]
pub struct MeasureContext<'a> {
    pub t: f64,
    pub own: &'a ParticleCloud,
    pub others: Vec<&'a ParticleCloud>,
}

impl<'a> MeasureContext<'a> {
    pub fn new(t: f64, own: &'a ParticleCloud, others: Vec<&'a ParticleCloud>) -> Self {
        Self { t, own, others }
    }

    /// Builds the context of population `i` from the laws of all populations.
    pub fn for_population(t: f64, i: usize, all: &[&'a ParticleCloud]) -> Self {
        let others = all
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, c)| *c)
            .collect();
        Self { t, own: all[i], others }
    }

    pub fn other(&self, j: usize) -> &'a ParticleCloud {
        self.others[j]
    }

    /// Mean of the first other population (the ν of a two-population game).
    pub fn nu_mean(&self) -> &'a Vector {
        self.others[0].mean()
    }

    pub fn mu_mean(&self) -> &'a Vector {
        self.own.mean()
    }
}

pub type MeasureFn<T> = Arc<dyn Fn(&MeasureContext) -> T + Send + Sync>;
pub type StateFn<T> = Arc<dyn Fn(&MeasureContext, &Vector) -> T + Send + Sync>;
pub type StateControlFn<T> = Arc<dyn Fn(&MeasureContext, &Vector, &Vector) -> T + Send + Sync>;
pub type GeneralLFn = Arc<dyn Fn(&MeasureContext, &Vector, &Vector, &Vector) -> Vector + Send + Sync>;

/// L-derivative `∂_μ h(t, x̃, μ, ν, α̃)(v)` of a cost with respect to the own law.
///
/// For terminal costs the control argument is an empty vector.
#[derive(Clone)]
pub enum LDerivative {
    /// The derivative does not depend on `v`; arguments are `(ctx, x̃, α̃)`.
    VIndependent(StateControlFn<Vector>),
    /// Arguments are `(ctx, x̃, α̃, v)`.
    General(GeneralLFn),
}

impl LDerivative {
    pub fn eval(&self, ctx: &MeasureContext, x: &Vector, alpha: &Vector, v: &Vector) -> Vector {
        match self {
            LDerivative::VIndependent(f) => f(ctx, x, alpha),
            LDerivative::General(f) => f(ctx, x, alpha, v),
        }
    }

    pub fn is_v_independent(&self) -> bool {
        matches!(self, LDerivative::VIndependent(_))
    }
}

#[derive(Clone)]
pub struct Drift {
    pub b0: MeasureFn<Vector>,
    pub b1: MeasureFn<Matrix>,
    pub b1_bar: Option<MeasureFn<Matrix>>,
    pub b2: MeasureFn<Matrix>,
}

impl Drift {
    pub fn affine(
        b0: MeasureFn<Vector>,
        b1: MeasureFn<Matrix>,
        b2: MeasureFn<Matrix>,
    ) -> Self {
        Self {
            b0,
            b1,
            b1_bar: None,
            b2,
        }
    }

    /// Measure-free drift `b0 + b1 x + b2 α`.
    pub fn constant(b0: Vector, b1: Matrix, b2: Matrix) -> Self {
        Self::affine(
            Arc::new(move |_| b0.clone()),
            Arc::new(move |_| b1.clone()),
            Arc::new(move |_| b2.clone()),
        )
    }

    pub fn with_mean_term(mut self, b1_bar: MeasureFn<Matrix>) -> Self {
        self.b1_bar = Some(b1_bar);
        self
    }
}

#[derive(Clone)]
pub struct Diffusion {
    pub s0: MeasureFn<Matrix>,
    /// `s1[l] = ∂σ/∂x_l`; `None` means zero.
    pub s1: Option<MeasureFn<Vec<Matrix>>>,
    pub s1_bar: Option<MeasureFn<Vec<Matrix>>>,
}

impl Diffusion {
    pub fn additive(s0: Matrix) -> Self {
        Self {
            s0: Arc::new(move |_| s0.clone()),
            s1: None,
            s1_bar: None,
        }
    }

    pub fn with_state_term(mut self, s1: MeasureFn<Vec<Matrix>>) -> Self {
        self.s1 = Some(s1);
        self
    }

    pub fn with_mean_term(mut self, s1_bar: MeasureFn<Vec<Matrix>>) -> Self {
        self.s1_bar = Some(s1_bar);
        self
    }
}

/// Declares `f(t, x, μ, ν, α) = ½ αᵀQα + ⟨linear(ctx, x), α⟩ + (terms free of α)`.
#[derive(Clone)]
pub struct QuadraticControlCost {
    pub hessian: Matrix,
    pub linear: StateFn<Vector>,
}

#[derive(Clone)]
pub struct Costs {
    pub f: StateControlFn<f64>,
    pub df_dx: StateControlFn<Vector>,
    pub df_dalpha: StateControlFn<Vector>,
    pub g: StateFn<f64>,
    pub dg_dx: StateFn<Vector>,
    pub df_dmu: Option<LDerivative>,
    pub dg_dmu: Option<LDerivative>,
    pub quadratic: Option<QuadraticControlCost>,
}

#[derive(Clone)]
pub enum ActionKind {
    Full,
    Box { lower: Vector, upper: Vector },
    Projection(Arc<dyn Fn(&Vector) -> Vector + Send + Sync>),
}

/// Closed convex action set with a distinguished anchor point `0_A`.
#[derive(Clone)]
pub struct ActionSet {
    dim: usize,
    kind: ActionKind,
    anchor: Vector,
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            ActionKind::Full => "full".to_string(),
            ActionKind::Box { lower, upper } => format!("box({:?}, {:?})", lower.as_slice(), upper.as_slice()),
            ActionKind::Projection(_) => "projection".to_string(),
        };
        write!(f, "ActionSet({kind}, dim={}, anchor={:?})", self.dim, self.anchor.as_slice())
    }
}

impl ActionSet {
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            kind: ActionKind::Full,
            anchor: Vector::zeros(dim),
        }
    }

    pub fn boxed(lower: Vector, upper: Vector) -> Result<Self, ModelError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(ModelError::Invalid("box bounds must have equal positive length".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(ModelError::Invalid("box lower bound exceeds upper bound".into()));
        }
        let anchor = Vector::from_iterator(
            lower.len(),
            lower.iter().zip(upper.iter()).map(|(l, u)| 0.0f64.clamp(*l, *u)),
        );
        Ok(Self {
            dim: lower.len(),
            kind: ActionKind::Box { lower, upper },
            anchor,
        })
    }

    pub fn custom(
        dim: usize,
        projection: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
        anchor: Vector,
    ) -> Self {
        Self {
            dim,
            kind: ActionKind::Projection(projection),
            anchor,
        }
    }

    pub fn with_anchor(mut self, anchor: Vector) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    pub fn anchor(&self) -> &Vector {
        &self.anchor
    }

    pub fn is_full(&self) -> bool {
        matches!(self.kind, ActionKind::Full)
    }

    pub fn project(&self, a: &Vector) -> Vector {
        match &self.kind {
            ActionKind::Full => a.clone(),
            ActionKind::Box { lower, upper } => Vector::from_iterator(
                a.len(),
                a.iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .map(|(v, (l, u))| v.clamp(*l, *u)),
            ),
            ActionKind::Projection(p) => p(a),
        }
    }

    pub fn contains(&self, a: &Vector, tol: f64) -> bool {
        (self.project(a) - a).norm() <= tol * (1.0 + a.norm())
    }

    /// A random feasible point: uniform on boxes, a projected Gaussian around the anchor otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vector {
        match &self.kind {
            ActionKind::Box { lower, upper } => Vector::from_iterator(
                self.dim,
                lower
                    .iter()
                    .zip(upper.iter())
                    .map(|(l, u)| {
                        let lo = l.max(-scale * 10.0);
                        let hi = u.min(scale * 10.0).max(lo);
                        lo + (hi - lo) * rng.random::<f64>()
                    }),
            ),
            _ => {
                let z = Vector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
                self.project(&(&self.anchor + z * scale))
            }
        }
    }
}

#[derive(Clone)]
pub enum InitialLaw {
    Gaussian { mean: Vector, cov_sqrt: Matrix },
    PointMass(Vector),
    Uniform { lower: Vector, upper: Vector },
    Mixture(Vec<(f64, InitialLaw)>),
    Custom {
        dim: usize,
        sampler: Arc<dyn Fn(&mut ChaCha8Rng) -> Vector + Send + Sync>,
        /// Declared moment order `r` such that the law lies in `P_r`.
        moment_order: f64,
    },
}

impl fmt::Debug for InitialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialLaw::Gaussian { mean, .. } => write!(f, "Gaussian(mean={:?})", mean.as_slice()),
            InitialLaw::PointMass(v) => write!(f, "PointMass({:?})", v.as_slice()),
            InitialLaw::Uniform { lower, upper } => {
                write!(f, "Uniform({:?}, {:?})", lower.as_slice(), upper.as_slice())
            }
            InitialLaw::Mixture(parts) => write!(f, "Mixture({} parts)", parts.len()),
            InitialLaw::Custom { dim, .. } => write!(f, "Custom(dim={dim})"),
        }
    }
}

impl InitialLaw {
    pub fn gaussian_iso(mean: Vector, std: f64) -> Self {
        let d = mean.len();
        InitialLaw::Gaussian {
            mean,
            cov_sqrt: Matrix::identity(d, d) * std,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::PointMass(v) => v.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
            InitialLaw::Mixture(parts) => parts.first().map_or(0, |(_, l)| l.dim()),
            InitialLaw::Custom { dim, .. } => *dim,
        }
    }

    /// Moment order `r` with the law in `P_r`; infinite for the built-in families.
    pub fn moment_order(&self) -> f64 {
        match self {
            InitialLaw::Custom { moment_order, .. } => *moment_order,
            InitialLaw::Mixture(parts) => parts
                .iter()
                .map(|(_, l)| l.moment_order())
                .fold(f64::INFINITY, f64::min),
            _ => f64::INFINITY,
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, InitialLaw::PointMass(_))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vector {
        match self {
            InitialLaw::Gaussian { mean, cov_sqrt } => {
                let z = Vector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                mean + cov_sqrt * z
            }
            InitialLaw::PointMass(v) => v.clone(),
            InitialLaw::Uniform { lower, upper } => Vector::from_iterator(
                lower.len(),
                lower
                    .iter()
                    .zip(upper.iter())
                    .map(|(l, u)| l + (u - l) * rng.random::<f64>()),
            ),
            InitialLaw::Mixture(parts) => {
                let total: f64 = parts.iter().map(|(w, _)| w).sum();
                let mut pick = rng.random::<f64>() * total;
                for (w, law) in parts {
                    if pick < *w {
                        return law.sample(rng);
                    }
                    pick -= w;
                }
                parts.last().expect("non-empty mixture").1.sample(rng)
            }
            InitialLaw::Custom { sampler, .. } => sampler(rng),
        }
    }

    /// Sample `n` particles; particle `p` draws from its own substream `stream.index(p)`.
    pub fn sample_points(&self, stream: SeedStream, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for p in 0..n {
            let mut rng = stream.index(p as u64).rng();
            out.extend(self.sample(&mut rng).iter());
        }
        out
    }

    pub fn sample_cloud(&self, stream: SeedStream, n: usize) -> ParticleCloud {
        ParticleCloud::new(self.dim(), self.sample_points(stream, n)).expect("initial law yields finite samples")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cooperation {
    Competitive,
    Cooperative,
}

#[derive(Clone)]
pub struct PopulationSpec {
    pub name: String,
    pub state_dim: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub costs: Costs,
    pub actions: ActionSet,
    pub cooperation: Cooperation,
    pub initial_law: InitialLaw,
    /// Linear-quadratic data when the population belongs to the LQ family.
    pub lq: Option<LqPopulation>,
}

impl fmt::Debug for PopulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PopulationSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.actions.dim())
            .field("cooperation", &self.cooperation)
            .field("initial_law", &self.initial_law)
            .finish_non_exhaustive()
    }
}

impl PopulationSpec {
    pub fn control_dim(&self) -> usize {
        self.actions.dim()
    }

    pub fn is_cooperative(&self) -> bool {
        self.cooperation == Cooperation::Cooperative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConstants {
    pub lipschitz_l: f64,
    pub convexity_lambda: f64,
    pub growth_k: f64,
}

impl ModelConstants {
    pub fn new(lipschitz_l: f64, convexity_lambda: f64, growth_k: f64) -> Result<Self, ModelError> {
        if !(convexity_lambda > 0.0) || !(lipschitz_l >= 0.0) || !(growth_k >= 0.0) {
            return Err(ModelError::Invalid(format!(
                "constants need lambda > 0, L >= 0, K >= 0 (got L={lipschitz_l}, lambda={convexity_lambda}, K={growth_k})"
            )));
        }
        Ok(Self {
            lipschitz_l,
            convexity_lambda,
            growth_k,
        })
    }
}

/// Declared measure-independence properties used by the finite-agent results.
///
/// * `mfg_fa_a1`: for competitive populations `b1`, `b2`, `s1` ignore the measures.
/// * `mftc_fa_a1`: for cooperative populations `b1`, `b1_bar`, `b2`, `s1`, `s1_bar` ignore the measures.
/// * `mftc_fa_b`: on top of `mftc_fa_a1`, `b0` and `s0` of cooperative populations ignore the measures.
/// * `mftc_mfg_fa_b`: population 0 cooperative with `mftc_fa_a1`, population 1 competitive with
///   `mfg_fa_a1`, and `b0`, `s0` of population 1 ignore the law of population 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StructuralFlags {
    pub mfg_fa_a1: bool,
    pub mftc_fa_a1: bool,
    pub mftc_fa_b: bool,
    pub mftc_mfg_fa_b: bool,
}

#[derive(Clone, Debug)]
pub struct GameSpec {
    pub name: String,
    pub populations: Vec<PopulationSpec>,
    pub horizon: f64,
    pub constants: ModelConstants,
    pub flags: StructuralFlags,
}

impl GameSpec {
    pub fn new(
        name: impl Into<String>,
        populations: Vec<PopulationSpec>,
        horizon: f64,
        constants: ModelConstants,
        flags: StructuralFlags,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            name: name.into(),
            populations,
            horizon,
            constants,
            flags,
        };
        spec.check_well_formed()?;
        Ok(spec)
    }

    pub fn check_well_formed(&self) -> Result<(), ModelError> {
        if self.populations.is_empty() {
            return Err(ModelError::Invalid("a game needs at least one population".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        let d = self.populations[0].state_dim;
        for (i, p) in self.populations.iter().enumerate() {
            if p.state_dim != d {
                return Err(ModelError::Invalid(format!(
                    "population {i} has state dimension {} but population 0 has {d}",
                    p.state_dim
                )));
            }
            if p.initial_law.dim() != d {
                return Err(ModelError::Invalid(format!("population {i}: initial law dimension mismatch")));
            }
            if p.actions.anchor().len() != p.actions.dim() {
                return Err(ModelError::Invalid(format!("population {i}: anchor dimension mismatch")));
            }
            if !p.actions.contains(p.actions.anchor(), 1e-12) {
                return Err(ModelError::Invalid(format!("population {i}: anchor point outside the action set")));
            }
            if p.cooperation == Cooperation::Competitive
                && (p.drift.b1_bar.is_some() || p.diffusion.s1_bar.is_some())
            {
                return Err(ModelError::Invalid(format!(
                    "population {i} is competitive but declares mean-of-own-law terms"
                )));
            }
            if p.cooperation == Cooperation::Cooperative
                && (p.costs.df_dmu.is_none() || p.costs.dg_dmu.is_none())
            {
                return Err(ModelError::Invalid(format!(
                    "population {i} is cooperative but lacks L-derivatives of its costs"
                )));
            }
            if let Some(q) = &p.costs.quadratic {
                if q.hessian.nrows() != p.control_dim() || q.hessian.ncols() != p.control_dim() {
                    return Err(ModelError::Invalid(format!("population {i}: quadratic Hessian has wrong shape")));
                }
            }
        }
        Ok(())
    }

    pub fn n_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn state_dim(&self) -> usize {
        self.populations[0].state_dim
    }

    pub fn population(&self, i: usize) -> &PopulationSpec {
        &self.populations[i]
    }

    pub fn all_competitive(&self) -> bool {
        self.populations.iter().all(|p| !p.is_cooperative())
    }

    pub fn all_cooperative(&self) -> bool {
        self.populations.iter().all(PopulationSpec::is_cooperative)
    }

    /// Same game with population `i` switched to the given cooperation flag.
    pub fn with_cooperation(&self, i: usize, c: Cooperation) -> Result<Self, ModelError> {
        let mut out = self.clone();
        out.populations[i].cooperation = c;
        out.check_well_formed()?;
        Ok(out)
    }
}
