//! Adjoint FBSDE solvers against frozen measure flows.
//!
//! Forward: Euler–Maruyama under the feedback `α̂(t, x, u(t, x))`.
//! Backward: least-squares Monte Carlo,
//!
//! ```text
//! Z_k = E[Y_{k+1} ΔW_kᵀ | X_k] / Δt
//! Y_k = E[Y_{k+1} − Z_k ΔW_k | X_k] + Δt · ∂_x H(X_k, Ŷ_k, Z_k, α̂_k)   (+ ∂_μ terms)
//! ```
//!
//! with the decoupling field `u` refitted after every sweep (Picard
//! iteration with damping). Subtracting `Z_k ΔW_k`, with `Z_k` fitted
//! leave-one-out, leaves the conditional expectation unchanged and removes
//! most of the regression noise.

mod cost;
mod lq;
mod regression;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hamiltonian::{HamiltonianError, KnotHamiltonian};
use crate::measures::{truncate_phi_n, MeasureError, MeasureFlow, ParticleCloud, TimeGrid};
use crate::model::{Cooperation, GameSpec, LDerivative, MeasureContext, Matrix, Vector};
use crate::rng::{brownian_increments, SeedStream};

pub use cost::{
    deviation_gap, optimal_cost, path_costs, simulate_policy, verify_sufficiency, CostEstimate, DeviationGap,
    Perturbation, Rollout, SufficiencyReport, SUFFICIENCY_BIAS_TOL,
};
pub use lq::{
    coupled_scalar_means, law_moments, mftc_scalar, solve_lq_riccati, LqSpec, RiccatiSolution, ScalarMftc,
    BLOWUP_NORM, REFINEMENT,
};
pub use regression::{Design, FeatureMap, KnotFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Number of time steps `N_t`.
    pub steps: usize,
    pub n_paths: usize,
    /// Total degree of the polynomial regression features.
    pub degree: u32,
    pub picard_tol: f64,
    pub max_picard: usize,
    /// Weight of the new fit in the damped field update.
    pub damping: f64,
    /// Copy particles used for `v`-dependent L-derivative averages.
    pub copy_particles: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            n_paths: 4096,
            degree: 2,
            picard_tol: 1e-3,
            max_picard: 50,
            damping: 0.5,
            copy_particles: 256,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<(), FbsdeError> {
        let bad = |m: &str| Err(FbsdeError::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.n_paths == 0 {
            return bad("n_paths must be positive");
        }
        if !(self.picard_tol > 0.0) {
            return bad("picard_tol must be positive");
        }
        if self.max_picard == 0 {
            return bad("max_picard must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if self.copy_particles == 0 {
            return bad("copy_particles must be positive");
        }
        Ok(())
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid, FbsdeError> {
        Ok(TimeGrid::new(horizon, self.steps)?)
    }
}

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("frozen flows do not fit the problem: {0}")]
    Flows(String),
    #[error("population {population} is {actual:?} but this solver needs a {expected:?} population")]
    Cooperation {
        population: usize,
        expected: Cooperation,
        actual: Cooperation,
    },
    #[error("Hamiltonian evaluation failed at knot {knot}: {source}")]
    Hamiltonian {
        knot: usize,
        #[source]
        source: HamiltonianError,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(
        "Picard iteration did not reach {tol:.1e} within {} sweeps (last change {:.3e}); \
         the horizon or the coupling may be too large",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    )]
    NonConvergence { tol: f64, history: Vec<f64> },
    #[error("Picard iteration diverged at sweep {}", history.len())]
    Diverged { history: Vec<f64> },
    #[error("Riccati solution exceeds norm 1e8 near t = {time:.4}; the horizon is too long")]
    HorizonTooLong { time: f64 },
    #[error("oracle unavailable: {0}")]
    Oracle(String),
    #[error("the master field is only defined along the solved flow (knot {knot})")]
    OffFlow { knot: usize },
}

/// Measure flows held fixed during one adjoint solve, optionally with
/// their `φ_n` truncations for the coefficients that take truncated laws.
#[derive(Debug, Clone)]
pub struct FrozenLaws {
    flows: Vec<MeasureFlow>,
    truncated: Option<Vec<MeasureFlow>>,
    level: Option<f64>,
}

impl FrozenLaws {
    pub fn new(flows: Vec<MeasureFlow>) -> Self {
        Self {
            flows,
            truncated: None,
            level: None,
        }
    }

    pub fn truncated(flows: Vec<MeasureFlow>, level: f64) -> Result<Self, MeasureError> {
        let truncated = flows
            .iter()
            .map(|f| f.map_clouds(|_, c| truncate_phi_n(c, level)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            flows,
            truncated: Some(truncated),
            level: Some(level),
        })
    }

    pub fn flows(&self) -> &[MeasureFlow] {
        &self.flows
    }

    /// Flows seen by `b0`, `b2`, `s0` and the costs.
    pub fn cost_flows(&self) -> &[MeasureFlow] {
        self.truncated.as_deref().unwrap_or(&self.flows)
    }

    pub fn level(&self) -> Option<f64> {
        self.level
    }
}

/// Own law of a McKean–Vlasov population at one knot.
pub(crate) struct OwnLaw {
    raw: ParticleCloud,
    cost: Option<ParticleCloud>,
}

impl OwnLaw {
    pub(crate) fn new(dim: usize, points: Vec<f64>, level: Option<f64>) -> Result<Self, MeasureError> {
        let raw = ParticleCloud::new(dim, points)?;
        let cost = match level {
            Some(n) => Some(truncate_phi_n(&raw, n)?),
            None => None,
        };
        Ok(Self { raw, cost })
    }

    pub(crate) fn raw(&self) -> &ParticleCloud {
        &self.raw
    }
}

/// Ordered parallel map over `0..n`.
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

pub(crate) fn first_error<T, E>(items: Vec<Result<T, E>>) -> Result<Vec<T>, E> {
    items.into_iter().collect()
}

/// Population `i` of `spec` against frozen laws on a fixed grid.
pub(crate) struct Problem<'a> {
    pub spec: &'a GameSpec,
    pub i: usize,
    pub laws: &'a FrozenLaws,
    pub grid: TimeGrid,
    pub mkv: bool,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(spec: &'a GameSpec, i: usize, laws: &'a FrozenLaws, grid: TimeGrid) -> Result<Self, FbsdeError> {
        let m = spec.n_populations();
        if i >= m {
            return Err(FbsdeError::Flows(format!("population index {i} out of range for {m} populations")));
        }
        if laws.flows.len() != m {
            return Err(FbsdeError::Flows(format!("{} flows given for {m} populations", laws.flows.len())));
        }
        for (j, f) in laws.flows.iter().enumerate() {
            if *f.grid() != grid {
                return Err(FbsdeError::Flows(format!("flow {j} is not on the solver grid")));
            }
            if f.dim() != spec.state_dim() {
                return Err(FbsdeError::Flows(format!("flow {j} has dimension {}", f.dim())));
            }
        }
        if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(FbsdeError::Flows("grid horizon differs from the game horizon".into()));
        }
        Ok(Self {
            spec,
            i,
            laws,
            grid,
            mkv: spec.population(i).is_cooperative(),
        })
    }

    pub(crate) fn dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub(crate) fn control_dim(&self) -> usize {
        self.spec.population(self.i).control_dim()
    }

    pub(crate) fn own_law(&self, points: &[f64]) -> Result<OwnLaw, FbsdeError> {
        Ok(OwnLaw::new(self.dim(), points.to_vec(), self.laws.level)?)
    }

    /// Hamiltonian at knot `k`; `own` replaces the frozen own law.
    pub(crate) fn hamiltonian<'b>(&'b self, k: usize, own: Option<&'b OwnLaw>) -> Result<KnotHamiltonian<'b>, FbsdeError>
    where
        'a: 'b,
    {
        let m = self.spec.n_populations();
        let raw: Vec<&ParticleCloud> = (0..m)
            .map(|j| match own {
                Some(o) if j == self.i => &o.raw,
                _ => self.laws.flows[j].at(k),
            })
            .collect();
        let t = self.grid.time(k);
        let raw_ctx = MeasureContext::for_population(t, self.i, &raw);
        let cost_ctx = if self.laws.truncated.is_some() {
            let cost: Vec<&ParticleCloud> = (0..m)
                .map(|j| match own {
                    Some(o) if j == self.i => o.cost.as_ref().unwrap_or(&o.raw),
                    _ => self.laws.cost_flows()[j].at(k),
                })
                .collect();
            Some(MeasureContext::for_population(t, self.i, &cost))
        } else {
            None
        };
        KnotHamiltonian::new(self.spec.population(self.i), raw_ctx, cost_ctx, self.spec.constants)
            .map_err(|source| FbsdeError::Hamiltonian { knot: k, source })
    }

    /// Copy-space average of an L-derivative, evaluated at every particle.
    pub(crate) fn copy_average(
        &self,
        ld: &LDerivative,
        ctx: &MeasureContext,
        x: &[f64],
        alpha: Option<&[f64]>,
        copy_particles: usize,
    ) -> CopyAverage {
        let d = self.dim();
        let kd = self.control_dim();
        let n = x.len() / d;
        let point = |q: usize| Vector::from_column_slice(&x[q * d..(q + 1) * d]);
        let control = |q: usize| match alpha {
            Some(a) => Vector::from_column_slice(&a[q * kd..(q + 1) * kd]),
            None => Vector::zeros(0),
        };
        if ld.is_v_independent() {
            let empty = Vector::zeros(d);
            let mut acc = Vector::zeros(d);
            for q in 0..n {
                acc += ld.eval(ctx, &point(q), &control(q), &empty);
            }
            CopyAverage::Uniform(acc / n as f64)
        } else {
            let stride = n.div_ceil(copy_particles).max(1);
            let copies: Vec<usize> = (0..n).step_by(stride).collect();
            let xs: Vec<Vector> = copies.iter().map(|&q| point(q)).collect();
            let als: Vec<Vector> = copies.iter().map(|&q| control(q)).collect();
            let per = par_map(n, |p| {
                let v = point(p);
                let mut acc = Vector::zeros(d);
                for (xq, aq) in xs.iter().zip(&als) {
                    acc += ld.eval(ctx, xq, aq, &v);
                }
                acc / xs.len() as f64
            });
            CopyAverage::PerParticle(per)
        }
    }
}

pub(crate) enum CopyAverage {
    Uniform(Vector),
    PerParticle(Vec<Vector>),
}

impl CopyAverage {
    pub(crate) fn get(&self, p: usize) -> &Vector {
        match self {
            CopyAverage::Uniform(v) => v,
            CopyAverage::PerParticle(list) => &list[p],
        }
    }
}

/// Per-knot fitted decoupling field `x ↦ u(t_k, x)`.
///
/// For cooperative populations it is the master field along the solved flow:
/// the own law is baked into the fit and recorded by its mean and `M_2`.
#[derive(Debug, Clone)]
pub struct DecouplingField {
    grid: TimeGrid,
    dim: usize,
    fits: Vec<KnotFit>,
    law_keys: Option<Vec<(Vector, f64)>>,
}

impl DecouplingField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fit(&self, k: usize) -> &KnotFit {
        &self.fits[k]
    }

    pub fn eval(&self, k: usize, x: &Vector) -> Vector {
        self.fits[k].eval(x.as_slice())
    }

    pub fn eval_slice(&self, k: usize, x: &[f64]) -> Vector {
        self.fits[k].eval(x)
    }

    /// `∂_x u(t_k, x)`.
    pub fn jacobian(&self, k: usize, x: &Vector) -> Matrix {
        self.fits[k].jacobian(x.as_slice())
    }

    /// Jacobian at the sample mean the knot was fitted on.
    pub fn slope_at_center(&self, k: usize) -> Matrix {
        let c = self.fits[k].features.center().to_vec();
        self.fits[k].jacobian(&c)
    }

    pub fn is_master(&self) -> bool {
        self.law_keys.is_some()
    }

    /// `u(t_k, x, law)`; only defined when `law` is the solved own law at `t_k`.
    pub fn eval_master(&self, k: usize, x: &Vector, law: &ParticleCloud) -> Result<Vector, FbsdeError> {
        if let Some(keys) = &self.law_keys {
            let (mean, m2) = &keys[k];
            let scale = 1.0 + m2;
            let off = (law.mean() - mean).norm() > 1e-9 * scale || (law.moment2() - m2).abs() > 1e-9 * scale;
            if off {
                return Err(FbsdeError::OffFlow { knot: k });
            }
        }
        Ok(self.eval(k, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// RMS of `u(T, X_T)` minus the terminal formula.
    pub terminal_residual: f64,
    /// Worst normalized correlation between backward regression residuals and features.
    pub orthogonality: f64,
    /// Largest difference quotient of the fitted field over sampled pairs.
    pub lipschitz: f64,
    /// Largest `|u(t, x)| / (1 + |x|)` over knots and samples.
    pub growth: f64,
}

/// Solution of one adjoint system on the particle sample.
///
/// Knot-indexed buffers are row-major over particles: `x[k]` and `y[k]` are
/// `n × d`, `z[k]` is `n × d × d` (row `a`, noise column `b`), `alpha[k]` is `n × k`.
#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub population: usize,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub control_dim: usize,
    pub mkv: bool,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub field: DecouplingField,
    pub picard_history: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Initial draws and Brownian increments, kept for common random numbers.
    pub x0: Vec<f64>,
    pub noise: Vec<f64>,
}

impl FbsdeSolution {
    pub fn cloud(&self, k: usize) -> ParticleCloud {
        ParticleCloud::new(self.dim, self.x[k].clone()).expect("solver keeps paths finite")
    }

    /// Empirical law of `X` at every knot.
    pub fn law_flow(&self) -> MeasureFlow {
        let clouds = (0..self.grid.knots()).map(|k| self.cloud(k)).collect();
        MeasureFlow::new(self.grid, clouds).expect("one cloud per knot")
    }

    pub fn x_at(&self, k: usize, p: usize) -> Vector {
        Vector::from_column_slice(&self.x[k][p * self.dim..(p + 1) * self.dim])
    }

    pub fn y_at(&self, k: usize, p: usize) -> Vector {
        Vector::from_column_slice(&self.y[k][p * self.dim..(p + 1) * self.dim])
    }

    pub fn z_at(&self, k: usize, p: usize) -> Matrix {
        let d = self.dim;
        Matrix::from_row_slice(d, d, &self.z[k][p * d * d..(p + 1) * d * d])
    }

    pub fn alpha_at(&self, k: usize, p: usize) -> Vector {
        let kd = self.control_dim;
        Vector::from_column_slice(&self.alpha[k][p * kd..(p + 1) * kd])
    }
}

/// Initial draws and Brownian increments of population `i` under `seed`.
pub fn sample_inputs(spec: &GameSpec, i: usize, grid: &TimeGrid, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let stream = SeedStream::new(seed).named("fbsde").index(i as u64);
    let x0 = spec.population(i).initial_law.sample_points(stream.named("init"), n);
    let noise = brownian_increments(stream.named("dw"), n, grid.steps(), spec.state_dim(), grid.dt());
    (x0, noise)
}

/// Field used by a forward sweep.
#[derive(Clone, Copy)]
pub(crate) enum FieldRef<'f> {
    /// `u(t, x) = ∂_x g(x, μ_T, ν_T)` at every knot.
    Terminal,
    Fitted(&'f DecouplingField),
}

pub(crate) struct Forward {
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub own: Vec<Option<OwnLaw>>,
}

struct Backward {
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    fits: Vec<KnotFit>,
    change: f64,
    orthogonality: f64,
    terminal_residual: f64,
}

impl Problem<'_> {
    fn noise_at<'n>(&self, noise: &'n [f64], p: usize, k: usize) -> &'n [f64] {
        let d = self.dim();
        let base = (p * self.grid.steps() + k) * d;
        &noise[base..base + d]
    }

    pub(crate) fn forward(&self, x0: &[f64], noise: &[f64], field: FieldRef) -> Result<Forward, FbsdeError> {
        let d = self.dim();
        let kd = self.control_dim();
        let n = x0.len() / d;
        let steps = self.grid.steps();
        let dt = self.grid.dt();
        let terminal = match field {
            FieldRef::Terminal => Some(self.hamiltonian(steps, None)?),
            FieldRef::Fitted(_) => None,
        };
        let mut xs = vec![x0.to_vec()];
        let mut alphas = Vec::with_capacity(steps + 1);
        let mut owns = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let own = if self.mkv { Some(self.own_law(&xs[k])?) } else { None };
            let ham = self.hamiltonian(k, own.as_ref())?;
            let xk = &xs[k];
            let step = par_map(n, |p| {
                let x = Vector::from_column_slice(&xk[p * d..(p + 1) * d]);
                let y = match (field, &terminal) {
                    (FieldRef::Fitted(u), _) => u.eval(k, &x),
                    (FieldRef::Terminal, Some(h)) => h.terminal_gradient(&x),
                    (FieldRef::Terminal, None) => unreachable!("terminal Hamiltonian built above"),
                };
                let a = ham.minimize(&x, &y)?;
                let next = if k < steps {
                    let dw = Vector::from_column_slice(self.noise_at(noise, p, k));
                    Some(&x + ham.drift(&x, &a) * dt + ham.sigma(&x) * dw)
                } else {
                    None
                };
                Ok((a, next))
            });
            let step = first_error(step).map_err(|source| FbsdeError::Hamiltonian { knot: k, source })?;
            let mut a_buf: Vec<f64> = Vec::with_capacity(n * kd);
            let mut x_buf: Vec<f64> = Vec::with_capacity(if k < steps { n * d } else { 0 });
            for (a, next) in &step {
                a_buf.extend(a.iter());
                if let Some(v) = next {
                    x_buf.extend(v.iter());
                }
            }
            if x_buf.iter().any(|v| !v.is_finite()) || a_buf.iter().any(|v| !v.is_finite()) {
                return Err(FbsdeError::Diverged { history: Vec::new() });
            }
            alphas.push(a_buf);
            owns.push(own);
            if k < steps {
                xs.push(x_buf);
            }
        }
        Ok(Forward {
            x: xs,
            alpha: alphas,
            own: owns,
        })
    }

    fn terminal_values(&self, fwd: &Forward, cfg: &SolverConfig) -> Result<Vec<f64>, FbsdeError> {
        let d = self.dim();
        let steps = self.grid.steps();
        let xs = &fwd.x[steps];
        let n = xs.len() / d;
        let ham = self.hamiltonian(steps, fwd.own[steps].as_ref())?;
        let copy = match (&self.spec.population(self.i).costs.dg_dmu, self.mkv) {
            (Some(ld), true) => Some(self.copy_average(ld, &ham.cost_ctx, xs, None, cfg.copy_particles)),
            _ => None,
        };
        let mut out = Vec::with_capacity(n * d);
        for p in 0..n {
            let x = Vector::from_column_slice(&xs[p * d..(p + 1) * d]);
            let mut y = ham.terminal_gradient(&x);
            if let Some(c) = &copy {
                y += c.get(p);
            }
            out.extend(y.iter());
        }
        Ok(out)
    }

    /// One backward sweep; the new field fits `(1 − θ) u_old + θ Y`.
    fn backward(
        &self,
        fwd: &Forward,
        noise: &[f64],
        old: FieldRef,
        theta: f64,
        cfg: &SolverConfig,
    ) -> Result<Backward, FbsdeError> {
        let d = self.dim();
        let steps = self.grid.steps();
        let dt = self.grid.dt();
        let n = fwd.x[0].len() / d;
        let old_terminal = match old {
            FieldRef::Terminal => Some(self.hamiltonian(steps, None)?),
            FieldRef::Fitted(_) => None,
        };
        let old_eval = |k: usize, x: &[f64]| -> Vector {
            match (old, &old_terminal) {
                (FieldRef::Fitted(u), _) => u.eval_slice(k, x),
                (FieldRef::Terminal, Some(h)) => h.terminal_gradient(&Vector::from_column_slice(x)),
                (FieldRef::Terminal, None) => unreachable!("terminal Hamiltonian built above"),
            }
        };

        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
        let mut zs: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
        let mut fits: Vec<Option<KnotFit>> = vec![None; steps + 1];
        let mut change: f64 = 0.0;
        let mut orthogonality: f64 = 0.0;

        // damped refit of raw values `y` at knot k; returns the RMS change
        let refit = |k: usize, y: &[f64], design: &Design| -> (KnotFit, f64) {
            let xs = &fwd.x[k];
            let olds: Vec<Vector> = (0..n).map(|p| old_eval(k, &xs[p * d..(p + 1) * d])).collect();
            let target = DMatrix::from_fn(n, d, |p, a| (1.0 - theta) * olds[p][a] + theta * y[p * d + a]);
            let coef = design.solve(&target);
            let fitted = design.fitted(&coef);
            let mut sq = 0.0;
            for p in 0..n {
                for a in 0..d {
                    sq += (fitted[(p, a)] - olds[p][a]).powi(2);
                }
            }
            let fit = KnotFit {
                features: design.features.clone(),
                coef,
            };
            (fit, (sq / n as f64).sqrt())
        };

        // terminal knot
        let y_t = self.terminal_values(fwd, cfg)?;
        let design_t = Design::new(&fwd.x[steps], d, cfg.degree);
        let (fit_t, c_t) = refit(steps, &y_t, &design_t);
        let terminal_residual = {
            let mut sq = 0.0;
            for p in 0..n {
                let u = fit_t.eval(&fwd.x[steps][p * d..(p + 1) * d]);
                for a in 0..d {
                    sq += (u[a] - y_t[p * d + a]).powi(2);
                }
            }
            (sq / n as f64).sqrt()
        };
        change = change.max(c_t);
        fits[steps] = Some(fit_t);
        zs[steps] = vec![0.0; n * d * d];
        ys[steps] = y_t;

        for k in (0..steps).rev() {
            let xs = &fwd.x[k];
            let y_next = &ys[k + 1];
            let design = Design::new(xs, d, cfg.degree);
            let z_target = DMatrix::from_fn(n, d * d, |p, c| {
                let (a, b) = (c / d, c % d);
                y_next[p * d + a] * self.noise_at(noise, p, k)[b] / dt
            });
            let z_coef = design.solve(&z_target);
            let z_hat = design.fitted(&z_coef);
            // the control variate must not see a particle's own increment
            let z_loo = design.fitted_loo(&z_target, &z_coef);
            let y_target = DMatrix::from_fn(n, d, |p, a| {
                let dw = self.noise_at(noise, p, k);
                let mut v = y_next[p * d + a];
                for b in 0..d {
                    v -= z_loo[(p, a * d + b)] * dw[b];
                }
                v
            });
            let y_coef = design.solve(&y_target);
            let y_hat = design.fitted(&y_coef);
            orthogonality = orthogonality.max(design.orthogonality(&y_target, &y_coef));

            let ham = self.hamiltonian(k, fwd.own[k].as_ref())?;
            let row = |p: usize| Vector::from_fn(d, |a, _| y_hat[(p, a)]);
            let zmat = |p: usize| Matrix::from_fn(d, d, |a, b| z_hat[(p, a * d + b)]);
            let alphas = first_error(par_map(n, |p| {
                let x = Vector::from_column_slice(&xs[p * d..(p + 1) * d]);
                ham.minimize(&x, &row(p))
            }))
            .map_err(|source| FbsdeError::Hamiltonian { knot: k, source })?;

            let mkv_terms = if self.mkv {
                let mean_y = Vector::from_fn(d, |a, _| y_hat.column(a).mean());
                let mean_z = Matrix::from_fn(d, d, |a, b| z_hat.column(a * d + b).mean());
                let flat: Vec<f64> = alphas.iter().flat_map(|a| a.iter().copied()).collect();
                let copy = match &self.spec.population(self.i).costs.df_dmu {
                    Some(ld) => self.copy_average(ld, &ham.cost_ctx, xs, Some(&flat), cfg.copy_particles),
                    None => CopyAverage::Uniform(Vector::zeros(d)),
                };
                Some((mean_y, mean_z, copy))
            } else {
                None
            };
            let drivers = first_error(par_map(n, |p| {
                let x = Vector::from_column_slice(&xs[p * d..(p + 1) * d]);
                let y = row(p);
                let z = zmat(p);
                let mut h = ham.dx(&x, &y, &z, &alphas[p]);
                if let Some((my, mz, copy)) = &mkv_terms {
                    h += ham.dmu(my, mz, copy.get(p))?;
                }
                Ok(y + h * dt)
            }))
            .map_err(|source| FbsdeError::Hamiltonian { knot: k, source })?;

            let y_k: Vec<f64> = drivers.iter().flat_map(|v| v.iter().copied()).collect();
            if y_k.iter().any(|v| !v.is_finite()) {
                return Err(FbsdeError::Diverged { history: Vec::new() });
            }
            let mut z_k = vec![0.0; n * d * d];
            for p in 0..n {
                for c in 0..d * d {
                    z_k[p * d * d + c] = z_hat[(p, c)];
                }
            }
            let (fit, c) = refit(k, &y_k, &design);
            change = change.max(c);
            fits[k] = Some(fit);
            ys[k] = y_k;
            zs[k] = z_k;
        }
        Ok(Backward {
            y: ys,
            z: zs,
            fits: fits.into_iter().map(|f| f.expect("every knot fitted")).collect(),
            change,
            orthogonality,
            terminal_residual,
        })
    }

    fn make_field(&self, fits: Vec<KnotFit>, fwd: &Forward) -> DecouplingField {
        let law_keys = if self.mkv {
            Some(
                fwd.own
                    .iter()
                    .map(|o| {
                        let c = o.as_ref().expect("MKV sweeps record the own law").raw();
                        (c.mean().clone(), c.moment2())
                    })
                    .collect(),
            )
        } else {
            None
        };
        DecouplingField {
            grid: self.grid,
            dim: self.dim(),
            fits,
            law_keys,
        }
    }
}

fn field_diagnostics(field: &DecouplingField, x: &[Vec<f64>], d: usize) -> (f64, f64) {
    let mut lip: f64 = 0.0;
    let mut growth: f64 = 0.0;
    for (k, xs) in x.iter().enumerate() {
        let n = xs.len() / d;
        let half = n / 2;
        let pt = |p: usize| &xs[p * d..(p + 1) * d];
        for p in 0..half.min(512) {
            let (a, b) = (pt(p), pt(p + half));
            let dx: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            if dx > 1e-12 {
                let du = (field.eval_slice(k, a) - field.eval_slice(k, b)).norm();
                lip = lip.max(du / dx);
            }
        }
        let stride = (n / 512).max(1);
        for p in (0..n).step_by(stride) {
            let a = pt(p);
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            growth = growth.max(field.eval_slice(k, a).norm() / (1.0 + norm));
        }
    }
    (lip, growth)
}

/// Solves the adjoint system of population `i`, dispatching on its cooperation flag.
///
/// `warm` seeds the Picard iteration with an earlier field on the same grid.
pub fn solve_adjoint(
    spec: &GameSpec,
    i: usize,
    laws: &FrozenLaws,
    cfg: &SolverConfig,
    seed: u64,
    warm: Option<&DecouplingField>,
) -> Result<FbsdeSolution, FbsdeError> {
    cfg.check()?;
    let grid = cfg.grid(spec.horizon)?;
    let problem = Problem::new(spec, i, laws, grid)?;
    let d = problem.dim();
    let (x0, noise) = sample_inputs(spec, i, &grid, cfg.n_paths, seed);

    let mut field: Option<DecouplingField> = warm.filter(|w| w.grid == grid && w.dim == d).cloned();
    let mut history = Vec::new();
    let mut orthogonality: f64 = 0.0;
    let mut converged = false;
    for _ in 0..cfg.max_picard {
        let current = field.as_ref().map_or(FieldRef::Terminal, FieldRef::Fitted);
        let theta = if field.is_some() { cfg.damping } else { 1.0 };
        let fwd = problem.forward(&x0, &noise, current).map_err(|e| with_history(e, &history))?;
        let back = problem
            .backward(&fwd, &noise, current, theta, cfg)
            .map_err(|e| with_history(e, &history))?;
        history.push(back.change);
        if !back.change.is_finite() || back.change > 1e12 {
            return Err(FbsdeError::Diverged { history });
        }
        orthogonality = back.orthogonality;
        field = Some(problem.make_field(back.fits, &fwd));
        if back.change <= cfg.picard_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FbsdeError::NonConvergence {
            tol: cfg.picard_tol,
            history,
        });
    }
    let field = field.expect("at least one sweep");
    // final sweep under the converged field, keeping the field itself
    let fwd = problem.forward(&x0, &noise, FieldRef::Fitted(&field))?;
    let back = problem.backward(&fwd, &noise, FieldRef::Fitted(&field), 1.0, cfg)?;
    let field = if problem.mkv {
        // the own law of the final sweep is the one the field is evaluated along
        DecouplingField {
            law_keys: problem.make_field(Vec::new(), &fwd).law_keys,
            ..field
        }
    } else {
        field
    };
    let (lipschitz, growth) = field_diagnostics(&field, &fwd.x, d);
    Ok(FbsdeSolution {
        population: i,
        grid,
        n_paths: cfg.n_paths,
        dim: d,
        control_dim: problem.control_dim(),
        mkv: problem.mkv,
        x: fwd.x,
        y: back.y,
        z: back.z,
        alpha: fwd.alpha,
        field,
        picard_history: history,
        diagnostics: Diagnostics {
            terminal_residual: back.terminal_residual,
            orthogonality: orthogonality.max(back.orthogonality),
            lipschitz,
            growth,
        },
        x0,
        noise,
    })
}

fn with_history(e: FbsdeError, history: &[f64]) -> FbsdeError {
    match e {
        FbsdeError::Diverged { .. } => FbsdeError::Diverged {
            history: history.to_vec(),
        },
        other => other,
    }
}

fn require(spec: &GameSpec, i: usize, expected: Cooperation) -> Result<(), FbsdeError> {
    if i >= spec.n_populations() {
        return Err(FbsdeError::Flows(format!("population index {i} out of range")));
    }
    let actual = spec.population(i).cooperation;
    if actual != expected {
        return Err(FbsdeError::Cooperation {
            population: i,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Adjoint FBSDE of a competitive population with all laws frozen.
pub fn solve_adjoint_competitive(
    spec: &GameSpec,
    i: usize,
    flows: &[MeasureFlow],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<FbsdeSolution, FbsdeError> {
    require(spec, i, Cooperation::Competitive)?;
    solve_adjoint(spec, i, &FrozenLaws::new(flows.to_vec()), cfg, seed, None)
}

/// McKean–Vlasov adjoint FBSDE of a cooperative population: its own law is
/// the law of its controlled state, the other populations stay frozen.
pub fn solve_adjoint_mkv(
    spec: &GameSpec,
    i: usize,
    flows: &[MeasureFlow],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<FbsdeSolution, FbsdeError> {
    require(spec, i, Cooperation::Cooperative)?;
    solve_adjoint(spec, i, &FrozenLaws::new(flows.to_vec()), cfg, seed, None)
}

/// Flows that hold each population's initial law constant in time, sampled
/// with `n` particles; a convenient frozen input for measure-free models.
pub fn initial_flows(spec: &GameSpec, grid: &TimeGrid, n: usize, seed: u64) -> Vec<MeasureFlow> {
    (0..spec.n_populations())
        .map(|j| {
            let stream = SeedStream::new(seed).named("initial-flow").index(j as u64);
            MeasureFlow::constant(*grid, spec.population(j).initial_law.sample_cloud(stream, n))
        })
        .collect()
}

#[cfg(test)]
mod tests;
