//! Finite-agent systems under the mean-field feedback.
//!
//! Two dynamics share the per-agent draws. In the i.i.d. copies every
//! coefficient reads the frozen equilibrium flows; in the interacting system
//! the coefficients and costs read the empirical measures of the agents at
//! each knot. Controls read the frozen flows and the equilibrium decoupling
//! fields in both. Agent `p` of population `i` in repetition `r` draws from
//! the substream `nagent/r/i/p` whatever the population sizes and the
//! strategies are, so runs at different sizes or with deviators are paired
//! agent by agent.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::{solve_adjoint, CostEstimate, DecouplingField, FbsdeError, FrozenLaws, SolverConfig};
use crate::fixedpoint::EquilibriumReport;
use crate::hamiltonian::{HamiltonianError, KnotHamiltonian};
use crate::measures::{sliced_w2, w2_squared_sorted, MeasureError, MeasureFlow, ParticleCloud, TimeGrid};
use crate::model::{observe_flags, Cooperation, GameSpec, MeasureContext, Vector};
use crate::rng::{brownian_path, SeedStream};

/// Sampled coefficient pairs used when checking structural preconditions.
const FLAG_SAMPLES: usize = 32;

#[derive(Debug, Error)]
pub enum NagentError {
    #[error("invalid finite-agent configuration: {0}")]
    Config(String),
    #[error("the equilibrium did not converge (final residual {delta:.3e}); pass allow_nonconverged to use it anyway")]
    NotConverged { delta: f64 },
    #[error("{mode:?} mode needs {needed}")]
    Mode { mode: NashMode, needed: String },
    #[error("{mode:?} mode requires ({flag}), violated with residual {residual:.3e}")]
    Precondition { mode: NashMode, flag: String, residual: f64 },
    #[error("a slope fit needs at least 3 sizes, got {0}")]
    FitRefused(usize),
    #[error("population {population}: Hamiltonian failed at knot {knot}: {source}")]
    Hamiltonian {
        population: usize,
        knot: usize,
        #[source]
        source: HamiltonianError,
    },
    #[error("population {population} left the finite range at knot {knot}")]
    Diverged { population: usize, knot: usize },
    #[error(transparent)]
    Solver(#[from] FbsdeError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// `ε_N² = N^{-2/max(d,4)} (1 + ln N · 1_{d=4})`.
pub fn chaos_epsilon_sq(n: usize, d: usize) -> f64 {
    let nf = n as f64;
    let e = nf.powf(-2.0 / d.max(4) as f64);
    if d == 4 {
        e * (1.0 + nf.ln())
    } else {
        e
    }
}

/// `max(ε_N, N^{-1/2})`, the rate of the approximate Nash bounds.
pub fn nash_epsilon(n: usize, d: usize) -> f64 {
    chaos_epsilon_sq(n, d).sqrt().max((n as f64).powf(-0.5))
}

/// What an agent does at `(t_k, x)`.
#[derive(Clone)]
pub enum Strategy {
    /// `α̂(t, x, μ_t, ν_t, u(t, x))` with the equilibrium flows and field.
    Feedback,
    /// Feedback plus `c` in every control coordinate, projected on the action set.
    Shift(f64),
    /// The anchor point of the action set.
    Anchor,
    /// Minimizer against a separately solved field and its frozen laws.
    Field(Arc<FieldPolicy>),
}

impl std::fmt::Debug for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Feedback => write!(f, "Feedback"),
            Strategy::Shift(c) => write!(f, "Shift({c})"),
            Strategy::Anchor => write!(f, "Anchor"),
            Strategy::Field(p) => write!(f, "Field(population {})", p.population),
        }
    }
}

/// A feedback `x ↦ α̂(t, x, laws, u(t, x))` for one population.
#[derive(Debug, Clone)]
pub struct FieldPolicy {
    pub population: usize,
    pub field: DecouplingField,
    pub laws: FrozenLaws,
}

/// One simulation of `N_1 + … + N_m` agents.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub sizes: Vec<usize>,
    pub repetition: u64,
    /// Coefficients and costs read the empirical measures.
    pub interacting: bool,
    /// Agents playing `Feedback` use the control process of their i.i.d.
    /// copy instead of the feedback on their own state.
    pub open_loop: bool,
    /// Strategy per population and agent; an empty list means `Feedback` for all.
    pub strategies: Vec<Vec<Strategy>>,
    /// Seed index per population and agent; an empty list means `0..N_i`.
    pub seed_ids: Vec<Vec<u64>>,
    pub allow_nonconverged: bool,
}

impl AgentSetup {
    pub fn new(sizes: Vec<usize>, interacting: bool) -> Self {
        Self {
            sizes,
            repetition: 0,
            interacting,
            open_loop: false,
            strategies: Vec::new(),
            seed_ids: Vec::new(),
            allow_nonconverged: false,
        }
    }

    fn strategy(&self, i: usize, p: usize) -> &Strategy {
        self.strategies
            .get(i)
            .and_then(|s| s.get(p))
            .unwrap_or(&Strategy::Feedback)
    }

    fn seed_id(&self, i: usize, p: usize) -> u64 {
        self.seed_ids
            .get(i)
            .filter(|ids| !ids.is_empty())
            .map_or(p as u64, |ids| ids[p])
    }

    fn check(&self, m: usize) -> Result<(), NagentError> {
        if self.sizes.len() != m {
            return Err(NagentError::Config(format!("{} sizes given for {m} populations", self.sizes.len())));
        }
        if self.interacting && self.sizes.contains(&0) {
            return Err(NagentError::Config("interacting systems need at least one agent per population".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if !s.is_empty() && s.len() != self.sizes[i] {
                return Err(NagentError::Config(format!("population {i}: {} strategies for {} agents", s.len(), self.sizes[i])));
            }
            for st in s {
                if let Strategy::Field(p) = st {
                    if p.population != i {
                        return Err(NagentError::Config(format!(
                            "population {i} given a policy solved for population {}",
                            p.population
                        )));
                    }
                }
            }
        }
        for (i, ids) in self.seed_ids.iter().enumerate() {
            if !ids.is_empty() && ids.len() != self.sizes.get(i).copied().unwrap_or(0) {
                return Err(NagentError::Config(format!("population {i}: seed ids do not match the size")));
            }
        }
        Ok(())
    }
}

/// States, controls and costs of one finite-agent run.
///
/// `paths[i][k]` is `N_i × d` row-major, `controls[i][k]` is `N_i × k_i`.
#[derive(Debug, Clone)]
pub struct AgentSystem {
    pub grid: TimeGrid,
    pub dim: usize,
    pub sizes: Vec<usize>,
    pub interacting: bool,
    pub repetition: u64,
    pub seed_ids: Vec<Vec<u64>>,
    pub paths: Vec<Vec<Vec<f64>>>,
    pub controls: Vec<Vec<Vec<f64>>>,
    /// `∫ f dt + g` per agent, trapezoidal in time.
    pub costs: Vec<Vec<f64>>,
    /// `∫ |β − α̂|² dt` per agent, with `α̂` the feedback at the agent's own state.
    pub deviation_sq: Vec<Vec<f64>>,
}

impl AgentSystem {
    pub fn state(&self, i: usize, k: usize, p: usize) -> &[f64] {
        &self.paths[i][k][p * self.dim..(p + 1) * self.dim]
    }

    pub fn cloud(&self, i: usize, k: usize) -> Result<ParticleCloud, MeasureError> {
        ParticleCloud::new(self.dim, self.paths[i][k].clone())
    }

    pub fn law_flow(&self, i: usize) -> Result<MeasureFlow, MeasureError> {
        let clouds = (0..self.grid.knots())
            .map(|k| self.cloud(i, k))
            .collect::<Result<Vec<_>, _>>()?;
        MeasureFlow::new(self.grid, clouds)
    }

    /// Average cost over the agents of population `i`.
    pub fn mean_cost(&self, i: usize) -> f64 {
        let c = &self.costs[i];
        c.iter().sum::<f64>() / c.len().max(1) as f64
    }
}

/// Frozen-law Hamiltonians at every knot, for the equilibrium or a policy.
fn frozen_hamiltonians<'a>(
    spec: &'a GameSpec,
    i: usize,
    laws: &'a FrozenLaws,
    grid: &TimeGrid,
) -> Result<Vec<KnotHamiltonian<'a>>, NagentError> {
    let m = spec.n_populations();
    if laws.flows().len() != m || laws.flows().iter().any(|f| f.grid() != grid) {
        return Err(NagentError::Config("frozen flows do not match the game and grid".into()));
    }
    (0..grid.knots())
        .map(|k| {
            let t = grid.time(k);
            let raw: Vec<&ParticleCloud> = laws.flows().iter().map(|f| f.at(k)).collect();
            let cost = laws.level().map(|_| {
                let c: Vec<&ParticleCloud> = laws.cost_flows().iter().map(|f| f.at(k)).collect();
                MeasureContext::for_population(t, i, &c)
            });
            KnotHamiltonian::new(spec.population(i), MeasureContext::for_population(t, i, &raw), cost, spec.constants)
                .map_err(|source| NagentError::Hamiltonian {
                    population: i,
                    knot: k,
                    source,
                })
        })
        .collect()
}

/// Equilibrium data shared by every run against one report.
struct Lab<'a> {
    spec: &'a GameSpec,
    grid: TimeGrid,
    fields: Vec<&'a DecouplingField>,
    hams: Vec<Vec<KnotHamiltonian<'a>>>,
}

impl<'a> Lab<'a> {
    fn new(
        spec: &'a GameSpec,
        eq: &'a EquilibriumReport,
        laws: &'a FrozenLaws,
        allow_nonconverged: bool,
    ) -> Result<Self, NagentError> {
        if !eq.converged && !allow_nonconverged {
            return Err(NagentError::NotConverged { delta: eq.final_delta() });
        }
        let m = spec.n_populations();
        if eq.solutions.len() != m || eq.model != spec.name {
            return Err(NagentError::Config(format!(
                "equilibrium of {} ({} populations) does not belong to {}",
                eq.model,
                eq.solutions.len(),
                spec.name
            )));
        }
        let grid = eq.solutions[0].grid;
        let hams = (0..m)
            .map(|i| frozen_hamiltonians(spec, i, laws, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            spec,
            grid,
            fields: eq.fields(),
            hams,
        })
    }

    fn inputs(&self, setup: &AgentSetup, i: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let d = self.spec.state_dim();
        let n = setup.sizes[i];
        let stream = SeedStream::new(seed)
            .named("nagent")
            .index(setup.repetition)
            .index(i as u64);
        let (init, dw) = (stream.named("init"), stream.named("dw"));
        let law = &self.spec.population(i).initial_law;
        let mut x0 = Vec::with_capacity(n * d);
        let mut noise = Vec::with_capacity(n * d * self.grid.steps());
        for p in 0..n {
            let id = setup.seed_id(i, p);
            x0.extend(law.sample(&mut init.index(id).rng()).iter());
            noise.extend(brownian_path(dw.index(id), self.grid.steps(), d, self.grid.dt()));
        }
        (x0, noise)
    }

    fn simulate(&self, setup: &AgentSetup, seed: u64) -> Result<AgentSystem, NagentError> {
        setup.check(self.spec.n_populations())?;
        let open = if setup.open_loop {
            let copies = AgentSetup {
                interacting: false,
                open_loop: false,
                strategies: Vec::new(),
                ..setup.clone()
            };
            Some(self.run(&copies, seed, None)?.controls)
        } else {
            None
        };
        self.run(setup, seed, open.as_deref())
    }

    fn run(&self, setup: &AgentSetup, seed: u64, open: Option<&[Vec<Vec<f64>>]>) -> Result<AgentSystem, NagentError> {
        let spec = self.spec;
        let m = spec.n_populations();
        let d = spec.state_dim();
        let grid = self.grid;
        let steps = grid.steps();
        let dt = grid.dt();

        // distinct separately solved policies and their Hamiltonians
        let mut policies: Vec<&Arc<FieldPolicy>> = Vec::new();
        for s in setup.strategies.iter().flatten() {
            if let Strategy::Field(p) = s {
                if !policies.iter().any(|q| Arc::ptr_eq(q, p)) {
                    policies.push(p);
                }
            }
        }
        let policy_hams = policies
            .iter()
            .map(|p| frozen_hamiltonians(spec, p.population, &p.laws, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        let policy_index = |p: &Arc<FieldPolicy>| policies.iter().position(|q| Arc::ptr_eq(q, p)).expect("collected above");

        let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..m).map(|i| self.inputs(setup, i, seed)).collect();
        let mut xs: Vec<Vec<f64>> = inputs.iter().map(|(x0, _)| x0.clone()).collect();
        let mut paths: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps + 1); m];
        let mut controls: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps + 1); m];
        let mut costs: Vec<Vec<f64>> = setup.sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut deviation_sq = costs.clone();

        for k in 0..=steps {
            let t = grid.time(k);
            let clouds = if setup.interacting {
                Some(
                    xs.iter()
                        .map(|pts| ParticleCloud::new(d, pts.clone()))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            } else {
                None
            };
            let empirical = match &clouds {
                Some(cs) => {
                    let refs: Vec<&ParticleCloud> = cs.iter().collect();
                    Some(
                        (0..m)
                            .map(|i| {
                                KnotHamiltonian::new(
                                    spec.population(i),
                                    MeasureContext::for_population(t, i, &refs),
                                    None,
                                    spec.constants,
                                )
                                .map_err(|source| NagentError::Hamiltonian {
                                    population: i,
                                    knot: k,
                                    source,
                                })
                            })
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                None => None,
            };
            let w = grid.trapezoid_weight(k) * dt;
            let last = k == steps;
            let mut next_xs = Vec::with_capacity(m);
            for i in 0..m {
                let n = setup.sizes[i];
                let pop = spec.population(i);
                let kd = pop.control_dim();
                let frozen = &self.hams[i][k];
                let dynamics = empirical.as_ref().map_or(frozen, |h| &h[i]);
                let field = self.fields[i];
                let x_k = &xs[i];
                let noise = &inputs[i].1;
                let out: Vec<Result<(Vector, Vector, f64, f64), HamiltonianError>> = (0..n)
                    .into_par_iter()
                    .map(|p| {
                        let x = Vector::from_column_slice(&x_k[p * d..(p + 1) * d]);
                        let reference = match open {
                            Some(o) => Vector::from_column_slice(&o[i][k][p * kd..(p + 1) * kd]),
                            None => frozen.minimize(&x, &field.eval(k, &x))?,
                        };
                        let a = match setup.strategy(i, p) {
                            Strategy::Feedback => reference.clone(),
                            Strategy::Shift(c) => pop.actions.project(&reference.add_scalar(*c)),
                            Strategy::Anchor => pop.actions.anchor().clone(),
                            Strategy::Field(policy) => {
                                let h = &policy_hams[policy_index(policy)][k];
                                h.minimize(&x, &policy.field.eval(k, &x))?
                            }
                        };
                        let mut c = w * dynamics.running_cost(&x, &a);
                        let next = if last {
                            c += dynamics.terminal_cost(&x);
                            x.clone()
                        } else {
                            let base = (p * steps + k) * d;
                            let dw = Vector::from_column_slice(&noise[base..base + d]);
                            &x + dynamics.drift(&x, &a) * dt + dynamics.sigma(&x) * dw
                        };
                        let dev = w * (&a - &reference).norm_squared();
                        Ok((a, next, c, dev))
                    })
                    .collect();
                let mut a_buf: Vec<f64> = Vec::with_capacity(n * kd);
                let mut x_buf: Vec<f64> = Vec::with_capacity(n * d);
                for (p, r) in out.into_iter().enumerate() {
                    let (a, next, c, dev) = r.map_err(|source| NagentError::Hamiltonian {
                        population: i,
                        knot: k,
                        source,
                    })?;
                    a_buf.extend(a.iter());
                    x_buf.extend(next.iter());
                    costs[i][p] += c;
                    deviation_sq[i][p] += dev;
                }
                if x_buf.iter().any(|v| !v.is_finite()) {
                    return Err(NagentError::Diverged { population: i, knot: k });
                }
                controls[i].push(a_buf);
                next_xs.push(x_buf);
            }
            for (i, x) in xs.iter_mut().enumerate() {
                let next = std::mem::take(&mut next_xs[i]);
                paths[i].push(std::mem::replace(x, next));
            }
        }
        Ok(AgentSystem {
            grid,
            dim: d,
            sizes: setup.sizes.clone(),
            interacting: setup.interacting,
            repetition: setup.repetition,
            seed_ids: (0..m)
                .map(|i| (0..setup.sizes[i]).map(|p| setup.seed_id(i, p)).collect())
                .collect(),
            paths,
            controls,
            costs,
            deviation_sq,
        })
    }
}

/// Runs the agents described by `setup` against the equilibrium.
pub fn simulate_agents(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    setup: &AgentSetup,
    seed: u64,
) -> Result<AgentSystem, NagentError> {
    let laws = eq.frozen_laws()?;
    Lab::new(spec, eq, &laws, setup.allow_nonconverged)?.simulate(setup, seed)
}

/// `N_i` independent copies of the mean-field optimal state per population.
pub fn simulate_iid_copies(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    sizes: &[usize],
    seed: u64,
) -> Result<AgentSystem, NagentError> {
    simulate_agents(spec, eq, &AgentSetup::new(sizes.to_vec(), false), seed)
}

/// The coupled system in which every agent plays the mean-field feedback.
pub fn simulate_interacting(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    sizes: &[usize],
    seed: u64,
) -> Result<AgentSystem, NagentError> {
    simulate_agents(spec, eq, &AgentSetup::new(sizes.to_vec(), true), seed)
}

fn w2_sq(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64, MeasureError> {
    if a.dim() == 1 {
        Ok(w2_squared_sorted(a.sorted_values()?, b.sorted_values()?))
    } else {
        Ok(sliced_w2(a, b, crate::measures::DEFAULT_PROJECTIONS, 0)?.powi(2))
    }
}

/// Least-squares line through `(ln x, ln y)` over the positive `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LogLogFit {
    pub fn fit(xs: &[f64], ys: &[f64]) -> Option<Self> {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
            .map(|(x, y)| (x.ln(), y.ln()))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
        Some(Self {
            slope,
            intercept: my - slope * mx,
            r_squared,
        })
    }
}

fn check_ladder(sizes: &[usize]) -> Result<(), NagentError> {
    if sizes.len() < 3 {
        return Err(NagentError::FitRefused(sizes.len()));
    }
    if sizes.contains(&0) {
        return Err(NagentError::Config("sizes must be positive".into()));
    }
    Ok(())
}

fn check_repetitions(r: usize) -> Result<(), NagentError> {
    if r < 2 {
        return Err(NagentError::Config("at least 2 repetitions are needed for standard errors".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosOptions {
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub population: usize,
    /// Reference particles as a multiple of the largest size.
    pub reference_factor: usize,
    pub allow_nonconverged: bool,
}

impl Default for ChaosOptions {
    fn default() -> Self {
        Self {
            sizes: vec![64, 256, 1024, 4096],
            repetitions: 32,
            population: 0,
            reference_factor: 16,
            allow_nonconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosPoint {
    pub n: usize,
    /// `sup_k E[W₂(μ̄_k^N, μ_k)²]`.
    pub estimate: f64,
    pub std_error: f64,
    /// Knot attaining the supremum.
    pub knot: usize,
    pub epsilon_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub population: usize,
    pub dim: usize,
    pub repetitions: usize,
    pub points: Vec<ChaosPoint>,
    pub fit: Option<LogLogFit>,
    /// `−2 / max(d, 4)`.
    pub theory_slope: f64,
    pub reference_size: usize,
    /// `sup_k W₂²` between the reference and an independent sample of half its size.
    pub reference_bias: f64,
    /// Declared moment order of the initial law (`None` when all moments
    /// are finite); the explicit rate needs more than 4.
    pub moment_order: Option<f64>,
}

/// Empirical-measure convergence of the i.i.d. copies to the equilibrium flow.
pub fn chaos_rate(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    opts: &ChaosOptions,
    seed: u64,
) -> Result<ChaosReport, NagentError> {
    check_ladder(&opts.sizes)?;
    check_repetitions(opts.repetitions)?;
    let m = spec.n_populations();
    let i = opts.population;
    if i >= m {
        return Err(NagentError::Config(format!("population {i} out of range")));
    }
    if opts.reference_factor < 16 {
        return Err(NagentError::Config("reference_factor must be at least 16".into()));
    }
    let laws = eq.frozen_laws()?;
    let lab = Lab::new(spec, eq, &laws, opts.allow_nonconverged)?;
    let only = |n: usize, rep: u64| {
        let mut sizes = vec![0; m];
        sizes[i] = n;
        AgentSetup {
            repetition: rep,
            ..AgentSetup::new(sizes, false)
        }
    };
    let max_n = *opts.sizes.iter().max().expect("non-empty ladder");
    let reference_size = opts.reference_factor * max_n;
    // the reference and its half-size check draw from their own seeds
    let ref_seed = SeedStream::new(seed).named("nagent-reference").value();
    let reference = lab.simulate(&only(reference_size, 0), ref_seed)?;
    let half = lab.simulate(&only(reference_size / 2, 1), ref_seed)?;
    let knots = lab.grid.knots();
    let ref_clouds = (0..knots)
        .map(|k| reference.cloud(i, k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reference_bias: f64 = 0.0;
    for (k, rc) in ref_clouds.iter().enumerate() {
        reference_bias = reference_bias.max(w2_sq(&half.cloud(i, k)?, rc)?);
    }

    let mut points = Vec::with_capacity(opts.sizes.len());
    for &n in &opts.sizes {
        let per_rep: Vec<Result<Vec<f64>, NagentError>> = (0..opts.repetitions)
            .into_par_iter()
            .map(|r| {
                let sys = lab.simulate(&only(n, r as u64), seed)?;
                (0..knots)
                    .map(|k| Ok(w2_sq(&sys.cloud(i, k)?, &ref_clouds[k])?))
                    .collect()
            })
            .collect();
        let per_rep = per_rep.into_iter().collect::<Result<Vec<_>, _>>()?;
        let mut best = (0, CostEstimate { mean: -1.0, std_error: 0.0 });
        for k in 0..knots {
            let samples: Vec<f64> = per_rep.iter().map(|v| v[k]).collect();
            let est = CostEstimate::from_samples(&samples);
            if est.mean > best.1.mean {
                best = (k, est);
            }
        }
        points.push(ChaosPoint {
            n,
            estimate: best.1.mean,
            std_error: best.1.std_error,
            knot: best.0,
            epsilon_sq: chaos_epsilon_sq(n, spec.state_dim()),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    Ok(ChaosReport {
        population: i,
        dim: spec.state_dim(),
        repetitions: opts.repetitions,
        fit: LogLogFit::fit(&xs, &ys),
        points,
        theory_slope: -2.0 / spec.state_dim().max(4) as f64,
        reference_size,
        reference_bias,
        moment_order: Some(spec.population(i).initial_law.moment_order()).filter(|q| q.is_finite()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingPoint {
    pub n: usize,
    /// `E sup_t |X_t − X̲_t|²`, averaged over agents and populations.
    pub estimate: f64,
    pub std_error: f64,
    pub epsilon_sq_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub points: Vec<CouplingPoint>,
    pub fit: Option<LogLogFit>,
}

/// Pathwise distance between the interacting agents and their i.i.d. copies
/// on the same draws; every population has `n` agents.
pub fn coupling_gap(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    sizes: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<CouplingReport, NagentError> {
    check_ladder(sizes)?;
    check_repetitions(repetitions)?;
    let laws = eq.frozen_laws()?;
    let lab = Lab::new(spec, eq, &laws, false)?;
    let m = spec.n_populations();
    let d = spec.state_dim();
    let mut points = Vec::new();
    for &n in sizes {
        let samples: Vec<Result<f64, NagentError>> = (0..repetitions)
            .into_par_iter()
            .map(|r| {
                let base = AgentSetup {
                    repetition: r as u64,
                    ..AgentSetup::new(vec![n; m], true)
                };
                let int = lab.simulate(&base, seed)?;
                let copies = lab.simulate(&AgentSetup { interacting: false, ..base }, seed)?;
                let mut acc = 0.0;
                for i in 0..m {
                    for p in 0..n {
                        let sup = (0..lab.grid.knots())
                            .map(|k| {
                                int.state(i, k, p)
                                    .iter()
                                    .zip(copies.state(i, k, p))
                                    .map(|(a, b)| (a - b).powi(2))
                                    .sum::<f64>()
                            })
                            .fold(0.0, f64::max);
                        acc += sup;
                    }
                }
                Ok(acc / (m * n) as f64)
            })
            .collect();
        let est = CostEstimate::from_samples(&samples.into_iter().collect::<Result<Vec<_>, _>>()?);
        points.push(CouplingPoint {
            n,
            estimate: est.mean,
            std_error: est.std_error,
            epsilon_sq_sum: m as f64 * chaos_epsilon_sq(n, d),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    Ok(CouplingReport {
        fit: LogLogFit::fit(&xs, &ys),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGapPoint {
    pub n: usize,
    pub population: usize,
    /// Per-agent cost in the interacting system.
    pub interacting: CostEstimate,
    /// Per-agent cost of the i.i.d. copies, an unbiased estimate of the mean-field cost.
    pub copies: CostEstimate,
    /// Paired estimate of `J^N − J^{mf}`.
    pub gap: f64,
    pub std_error: f64,
    pub epsilon_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConvergenceReport {
    pub sizes: Vec<usize>,
    /// Mean-field costs on the solver's own paths.
    pub mean_field: Vec<CostEstimate>,
    pub points: Vec<CostGapPoint>,
}

impl CostConvergenceReport {
    pub fn for_population(&self, i: usize) -> Vec<&CostGapPoint> {
        self.points.iter().filter(|p| p.population == i).collect()
    }

    /// `|J^N − J^{mf}|` strictly decreasing along the ladder, except for at
    /// most one increase that stays within one combined standard error.
    pub fn decreasing(&self, i: usize) -> bool {
        let pts = self.for_population(i);
        let mut excused = 0;
        for w in pts.windows(2) {
            let (a, b) = (w[0].gap.abs(), w[1].gap.abs());
            if b < a {
                continue;
            }
            let se = w[0].std_error.hypot(w[1].std_error);
            if b - a <= se && excused == 0 {
                excused += 1;
            } else {
                return false;
            }
        }
        true
    }

    /// `|J^N − J^{mf}| / Σ_j ε_{N_j}` along the ladder.
    pub fn ratios(&self, i: usize) -> Vec<f64> {
        self.for_population(i)
            .iter()
            .map(|p| p.gap.abs() / p.epsilon_sum)
            .collect()
    }
}

/// Cost of the interacting system against the mean-field cost, every
/// population with `n` agents, paired with the i.i.d. copies on the same draws.
pub fn cost_convergence(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    sizes: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<CostConvergenceReport, NagentError> {
    check_ladder(sizes)?;
    check_repetitions(repetitions)?;
    let laws = eq.frozen_laws()?;
    let lab = Lab::new(spec, eq, &laws, false)?;
    let m = spec.n_populations();
    let d = spec.state_dim();
    let mut points = Vec::new();
    for &n in sizes {
        let runs: Vec<Result<(AgentSystem, AgentSystem), NagentError>> = (0..repetitions)
            .into_par_iter()
            .map(|r| {
                let base = AgentSetup {
                    repetition: r as u64,
                    ..AgentSetup::new(vec![n; m], true)
                };
                let int = lab.simulate(&base, seed)?;
                let copies = lab.simulate(&AgentSetup { interacting: false, ..base }, seed)?;
                Ok((int, copies))
            })
            .collect();
        let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
        for i in 0..m {
            let int: Vec<f64> = runs.iter().map(|(a, _)| a.mean_cost(i)).collect();
            let cop: Vec<f64> = runs.iter().map(|(_, b)| b.mean_cost(i)).collect();
            let diff: Vec<f64> = int.iter().zip(&cop).map(|(a, b)| a - b).collect();
            let gap = CostEstimate::from_samples(&diff);
            points.push(CostGapPoint {
                n,
                population: i,
                interacting: CostEstimate::from_samples(&int),
                copies: CostEstimate::from_samples(&cop),
                gap: gap.mean,
                std_error: gap.std_error,
                epsilon_sum: m as f64 * chaos_epsilon_sq(n, d).sqrt(),
            });
        }
    }
    Ok(CostConvergenceReport {
        sizes: sizes.to_vec(),
        mean_field: eq.costs.clone(),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NashMode {
    /// One agent of a competitive population deviates.
    Competitive,
    /// A whole cooperative population deviates exchangeably.
    Cooperative,
    /// Mixed game: the cooperative population deviates as a whole.
    MixedSetup1,
    /// Mixed game: one agent of the competitive population deviates.
    MixedSetup2,
}

impl NashMode {
    pub fn whole_population(self) -> bool {
        matches!(self, NashMode::Cooperative | NashMode::MixedSetup1)
    }

    pub fn label(self) -> &'static str {
        match self {
            NashMode::Competitive => "competitive",
            NashMode::Cooperative => "cooperative",
            NashMode::MixedSetup1 => "mixed_setup1",
            NashMode::MixedSetup2 => "mixed_setup2",
        }
    }
}

/// Member of the tested deviation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deviation {
    /// `β = α̂`.
    None,
    /// `β = α̂ + c`, projected on the action set.
    Shift { c: f64 },
    /// `β` constant at the anchor point.
    Anchor,
    /// Optimal feedback against the empirical flows of the first baseline repetition.
    BestResponse,
}

impl Deviation {
    /// The default family: no deviation, shifts `±0.1`, `±0.5`, anchor.
    pub fn family() -> Vec<Self> {
        vec![
            Deviation::None,
            Deviation::Shift { c: 0.1 },
            Deviation::Shift { c: -0.1 },
            Deviation::Shift { c: 0.5 },
            Deviation::Shift { c: -0.5 },
            Deviation::Anchor,
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Deviation::None => "none".into(),
            Deviation::Shift { c } => format!("shift{c:+}"),
            Deviation::Anchor => "anchor".into(),
            Deviation::BestResponse => "best_response".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashOptions {
    pub mode: NashMode,
    /// Deviating population in the single-type modes; ignored in the mixed ones.
    pub population: usize,
    pub sizes: Vec<usize>,
    pub deviations: Vec<Deviation>,
    pub repetitions: usize,
    pub open_loop: bool,
    /// Reject specs violating the mode's structural assumption.
    pub enforce_flags: bool,
    pub allow_nonconverged: bool,
    /// Paths of the adjoint solve behind [`Deviation::BestResponse`].
    pub best_response_paths: usize,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            mode: NashMode::Competitive,
            population: 0,
            sizes: vec![64, 256, 1024],
            deviations: Deviation::family(),
            repetitions: 32,
            open_loop: false,
            enforce_flags: true,
            allow_nonconverged: false,
            best_response_paths: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spillover {
    pub population: usize,
    /// Change of the population's per-agent cost caused by the deviation.
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    pub n: usize,
    pub deviation: String,
    /// `J(β) − J(α̂)` of the deviator (per agent for a deviating population).
    pub gain: f64,
    pub std_error: f64,
    /// `gain / Σ_j ε̃_{N_j}`.
    pub normalized: f64,
    /// `E ∫ |β − α̂|² dt` of the deviator, `α̂` taken at its own state.
    pub distance_sq: f64,
    pub spillover: Vec<Spillover>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashGapReport {
    pub mode: NashMode,
    pub population: usize,
    pub whole_population: bool,
    pub open_loop: bool,
    pub flags_checked: bool,
    pub repetitions: usize,
    /// Baseline and deviation runs share every agent's draws.
    pub pairing: String,
    pub sizes: Vec<usize>,
    /// `Σ_j ε̃_{N_j}` per size.
    pub epsilon_sum: Vec<f64>,
    pub gains: Vec<GainEstimate>,
    /// Smallest `κ` consistent with every gain within two standard errors:
    /// `max(0, −min (gain + 2 SE)) / Σ ε̃` per size.
    pub kappa_per_n: Vec<f64>,
    /// Point version `max(0, −min gain) / Σ ε̃`, without the sampling slack.
    pub kappa_point_per_n: Vec<f64>,
    /// Largest `κ_N`: the floor `min gain ≥ −κ Σ ε̃` holds at every size with it.
    pub kappa: f64,
    /// Spread `max κ_N / min κ_N` over sizes that need a positive `κ`; 1 if fewer than two do.
    pub kappa_ratio: f64,
}

impl NashGapReport {
    pub fn gains_at(&self, n: usize) -> Vec<&GainEstimate> {
        self.gains.iter().filter(|g| g.n == n).collect()
    }

    pub fn min_gain(&self, n: usize) -> f64 {
        self.gains_at(n).iter().map(|g| g.gain).fold(f64::INFINITY, f64::min)
    }
}

/// Checks that `mode` fits the cooperation flags and, if `enforce`, the
/// structural assumption; returns the deviating population.
pub fn nash_precondition(
    spec: &GameSpec,
    mode: NashMode,
    population: usize,
    enforce: bool,
    seed: u64,
) -> Result<usize, NagentError> {
    let m = spec.n_populations();
    let coop = |i: usize| spec.population(i).cooperation == Cooperation::Cooperative;
    let mixed = m == 2 && coop(0) && !coop(1);
    let target = match mode {
        NashMode::Competitive | NashMode::Cooperative => {
            if population >= m {
                return Err(NagentError::Config(format!("population {population} out of range")));
            }
            population
        }
        NashMode::MixedSetup1 => 0,
        NashMode::MixedSetup2 => 1,
    };
    let needed = match mode {
        NashMode::Competitive if !spec.all_competitive() => Some("all populations competitive"),
        NashMode::Cooperative if !spec.all_cooperative() => Some("all populations cooperative"),
        NashMode::MixedSetup1 | NashMode::MixedSetup2 if !mixed => {
            Some("two populations, the first cooperative and the second competitive")
        }
        _ => None,
    };
    if let Some(needed) = needed {
        return Err(NagentError::Mode {
            mode,
            needed: needed.into(),
        });
    }
    if enforce {
        let mut rng = SeedStream::new(seed).named("model-init").named("nash-flags").rng();
        let observed = observe_flags(spec, FLAG_SAMPLES, &mut rng);
        let check = match mode {
            NashMode::Competitive => None,
            NashMode::Cooperative => Some(("MFTC-FA-b", observed.mftc_fa_b)),
            NashMode::MixedSetup1 | NashMode::MixedSetup2 => Some(("MFTC-MFG-FA-b", observed.mftc_mfg_fa_b)),
        };
        if let Some((flag, (holds, residual))) = check {
            if !holds {
                return Err(NagentError::Precondition {
                    mode,
                    flag: flag.into(),
                    residual,
                });
            }
        }
    }
    Ok(target)
}

/// Deviation gains of a single agent or a whole population against the
/// mean-field feedback, with common random numbers.
pub fn nash_gap(
    spec: &GameSpec,
    eq: &EquilibriumReport,
    opts: &NashOptions,
    seed: u64,
) -> Result<NashGapReport, NagentError> {
    let target = nash_precondition(spec, opts.mode, opts.population, opts.enforce_flags, seed)?;
    if opts.sizes.is_empty() || opts.sizes.contains(&0) {
        return Err(NagentError::Config("sizes must be non-empty and positive".into()));
    }
    if opts.deviations.is_empty() {
        return Err(NagentError::Config("the deviation family is empty".into()));
    }
    check_repetitions(opts.repetitions)?;
    let laws = eq.frozen_laws()?;
    let lab = Lab::new(spec, eq, &laws, opts.allow_nonconverged)?;
    let m = spec.n_populations();
    let d = spec.state_dim();
    let whole = opts.mode.whole_population();

    let mut gains = Vec::new();
    let mut epsilon_sum = Vec::new();
    let mut kappa_per_n = Vec::new();
    let mut kappa_point_per_n = Vec::new();
    for &n in &opts.sizes {
        let eps: f64 = m as f64 * nash_epsilon(n, d);
        let base_setup = |r: u64| AgentSetup {
            repetition: r,
            open_loop: opts.open_loop,
            allow_nonconverged: opts.allow_nonconverged,
            ..AgentSetup::new(vec![n; m], true)
        };
        let best = if opts.deviations.contains(&Deviation::BestResponse) {
            Some(Arc::new(best_response(&lab, &base_setup(0), target, opts, seed)?))
        } else {
            None
        };
        let strategies: Vec<Strategy> = opts
            .deviations
            .iter()
            .map(|dev| match dev {
                Deviation::None => Strategy::Feedback,
                Deviation::Shift { c } => Strategy::Shift(*c),
                Deviation::Anchor => Strategy::Anchor,
                Deviation::BestResponse => Strategy::Field(best.clone().expect("solved above")),
            })
            .collect();
        let deviators = if whole { n } else { 1 };

        // per repetition and deviation: (gain, distance, spillover per population)
        type Sample = (f64, f64, Vec<f64>);
        let per_rep: Vec<Result<Vec<Sample>, NagentError>> = (0..opts.repetitions)
            .into_par_iter()
            .map(|r| {
                let setup = base_setup(r as u64);
                let base = lab.simulate(&setup, seed)?;
                strategies
                    .iter()
                    .map(|st| {
                        let mut plan = vec![Vec::new(); m];
                        plan[target] = (0..n)
                            .map(|p| if p < deviators { st.clone() } else { Strategy::Feedback })
                            .collect();
                        let dev = lab.simulate(
                            &AgentSetup {
                                strategies: plan,
                                ..setup.clone()
                            },
                            seed,
                        )?;
                        let own = |sys: &AgentSystem| sys.costs[target][..deviators].iter().sum::<f64>() / deviators as f64;
                        let dist: f64 = dev.deviation_sq[target][..deviators].iter().sum();
                        let spill = (0..m).map(|j| dev.mean_cost(j) - base.mean_cost(j)).collect();
                        Ok((own(&dev) - own(&base), dist / deviators as f64, spill))
                    })
                    .collect()
            })
            .collect();
        let per_rep = per_rep.into_iter().collect::<Result<Vec<_>, _>>()?;
        let mut min_gain = f64::INFINITY;
        let mut min_upper = f64::INFINITY;
        for (j, dev) in opts.deviations.iter().enumerate() {
            let g = CostEstimate::from_samples(&per_rep.iter().map(|s| s[j].0).collect::<Vec<_>>());
            let dist = per_rep.iter().map(|s| s[j].1).sum::<f64>() / per_rep.len() as f64;
            let spillover = (0..m)
                .filter(|&q| q != target)
                .map(|q| {
                    let e = CostEstimate::from_samples(&per_rep.iter().map(|s| s[j].2[q]).collect::<Vec<_>>());
                    Spillover {
                        population: q,
                        mean: e.mean,
                        std_error: e.std_error,
                    }
                })
                .collect();
            min_gain = min_gain.min(g.mean);
            min_upper = min_upper.min(g.mean + 2.0 * g.std_error);
            gains.push(GainEstimate {
                n,
                deviation: dev.label(),
                gain: g.mean,
                std_error: g.std_error,
                normalized: g.mean / eps,
                distance_sq: dist,
                spillover,
            });
        }
        epsilon_sum.push(eps);
        kappa_per_n.push((-min_upper).max(0.0) / eps);
        kappa_point_per_n.push((-min_gain).max(0.0) / eps);
    }
    let kappa = kappa_per_n.iter().copied().fold(0.0, f64::max);
    let positive: Vec<f64> = kappa_per_n.iter().copied().filter(|&k| k > 0.0).collect();
    let kappa_ratio = if positive.len() < 2 {
        1.0
    } else {
        positive.iter().copied().fold(0.0, f64::max) / positive.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(NashGapReport {
        mode: opts.mode,
        population: target,
        whole_population: whole,
        open_loop: opts.open_loop,
        flags_checked: opts.enforce_flags,
        repetitions: opts.repetitions,
        pairing: "common random numbers, agent by agent".into(),
        sizes: opts.sizes.clone(),
        epsilon_sum,
        gains,
        kappa_per_n,
        kappa_point_per_n,
        kappa,
        kappa_ratio,
    })
}

/// Adjoint solve of the deviating population against the empirical flows of
/// one baseline run.
fn best_response(
    lab: &Lab,
    setup: &AgentSetup,
    target: usize,
    opts: &NashOptions,
    seed: u64,
) -> Result<FieldPolicy, NagentError> {
    let base = lab.simulate(setup, seed)?;
    let flows = (0..lab.spec.n_populations())
        .map(|j| base.law_flow(j))
        .collect::<Result<Vec<_>, _>>()?;
    let laws = FrozenLaws::new(flows);
    let cfg = SolverConfig {
        steps: lab.grid.steps(),
        n_paths: opts.best_response_paths,
        ..SolverConfig::default()
    };
    let br_seed = SeedStream::new(seed).named("nagent-best-response").value();
    let sol = solve_adjoint(lab.spec, target, &laws, &cfg, br_seed, None)?;
    Ok(FieldPolicy {
        population: target,
        field: sol.field,
        laws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::SolverConfig;
    use crate::fixedpoint::{solve_matching, FixedPointConfig};
    use crate::model::{lookup_builtin, BuiltinParams, InitialLaw};
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> SolverConfig {
        SolverConfig {
            steps: 10,
            n_paths: 512,
            ..SolverConfig::default()
        }
    }

    fn solve(spec: &GameSpec) -> EquilibriumReport {
        let eq = solve_matching(spec, &small_cfg(), &FixedPointConfig::default(), 5).unwrap();
        assert!(eq.converged);
        eq
    }

    #[test]
    fn epsilon_rates() {
        assert_abs_diff_eq!(chaos_epsilon_sq(16, 1), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(chaos_epsilon_sq(16, 4), 0.25 * (1.0 + 16f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(chaos_epsilon_sq(64, 6), 64f64.powf(-1.0 / 3.0), epsilon = 1e-15);
        // d ≤ 4 without the log: ε_N = N^{-1/4} dominates N^{-1/2}
        assert_abs_diff_eq!(nash_epsilon(256, 1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn measure_free_copies_equal_interacting() {
        let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let a = simulate_iid_copies(&spec, &eq, &[40], 3).unwrap();
        let b = simulate_interacting(&spec, &eq, &[40], 3).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.costs, b.costs);
    }

    #[test]
    fn agent_draws_do_not_depend_on_the_population_size() {
        let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let small = simulate_iid_copies(&spec, &eq, &[5], 9).unwrap();
        let large = simulate_iid_copies(&spec, &eq, &[50], 9).unwrap();
        for k in 0..small.grid.knots() {
            assert_eq!(&small.paths[0][k][..], &large.paths[0][k][..5]);
        }
    }

    #[test]
    fn single_agent_sees_its_own_point_mass() {
        let spec = lookup_builtin("lq-1pop", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let sys = simulate_interacting(&spec, &eq, &[1], 4).unwrap();
        // replay by hand: the empirical law is the agent's own Dirac mass
        let laws = eq.frozen_laws().unwrap();
        let lab = Lab::new(&spec, &eq, &laws, false).unwrap();
        let setup = AgentSetup::new(vec![1], true);
        let (x0, noise) = lab.inputs(&setup, 0, 4);
        let grid = lab.grid;
        let mut x = Vector::from_column_slice(&x0);
        for k in 0..grid.steps() {
            assert_abs_diff_eq!(x[0], sys.state(0, k, 0)[0], epsilon = 1e-12);
            let own = ParticleCloud::point_mass(&x);
            let ctx = MeasureContext::for_population(grid.time(k), 0, &[&own]);
            let h = KnotHamiltonian::new(spec.population(0), ctx, None, spec.constants).unwrap();
            let a = lab.hams[0][k].minimize(&x, &lab.fields[0].eval(k, &x)).unwrap();
            x = &x + h.drift(&x, &a) * grid.dt() + h.sigma(&x) * Vector::from_element(1, noise[k]);
        }
        assert_abs_diff_eq!(x[0], sys.state(0, grid.steps(), 0)[0], epsilon = 1e-12);
    }

    #[test]
    fn exchangeable_under_permuted_seeds() {
        let spec = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let n = 12;
        let base = simulate_interacting(&spec, &eq, &[n, n], 2).unwrap();
        let perm: Vec<u64> = (0..n as u64).map(|p| (p * 5 + 3) % n as u64).collect();
        let setup = AgentSetup {
            seed_ids: vec![perm.clone(), Vec::new()],
            ..AgentSetup::new(vec![n, n], true)
        };
        let permuted = simulate_agents(&spec, &eq, &setup, 2).unwrap();
        for (slot, &id) in perm.iter().enumerate() {
            let a = base.costs[0][id as usize];
            let b = permuted.costs[0][slot];
            assert_abs_diff_eq!(a, b, epsilon = 1e-12 * (1.0 + a.abs()));
        }
        let copies = simulate_iid_copies(&spec, &eq, &[n, n], 2).unwrap();
        let copies_perm = simulate_agents(&spec, &eq, &AgentSetup { interacting: false, ..setup }, 2).unwrap();
        for (slot, &id) in perm.iter().enumerate() {
            assert_eq!(copies.costs[0][id as usize], copies_perm.costs[0][slot]);
        }
    }

    #[test]
    fn deterministic_point_mass_has_no_chaos() {
        let mut spec = lookup_builtin("lq-1d", &BuiltinParams::new().with("sigma", 0.0)).unwrap();
        spec.populations[0].initial_law = InitialLaw::PointMass(Vector::from_element(1, 0.7));
        let eq = solve(&spec);
        let opts = ChaosOptions {
            sizes: vec![4, 8, 16],
            repetitions: 3,
            ..ChaosOptions::default()
        };
        let rep = chaos_rate(&spec, &eq, &opts, 1).unwrap();
        assert!(rep.points.iter().all(|p| p.estimate == 0.0));
        assert!(rep.fit.is_none());
    }

    #[test]
    fn short_ladders_are_refused() {
        let spec = lookup_builtin("lq-1d", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let opts = ChaosOptions {
            sizes: vec![8, 16],
            ..ChaosOptions::default()
        };
        assert!(matches!(chaos_rate(&spec, &eq, &opts, 1), Err(NagentError::FitRefused(2))));
    }

    #[test]
    fn null_deviation_has_zero_gain() {
        let spec = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let opts = NashOptions {
            sizes: vec![8],
            repetitions: 64,
            deviations: vec![Deviation::None, Deviation::Shift { c: 0.5 }],
            ..NashOptions::default()
        };
        let rep = nash_gap(&spec, &eq, &opts, 3).unwrap();
        assert_eq!(rep.gains[0].gain, 0.0);
        assert_eq!(rep.gains[0].std_error, 0.0);
        assert!(rep.gains[1].gain > 0.0, "{:?}", rep.gains);
        // a constant shift moves the control by exactly c wherever it is not projected
        assert_abs_diff_eq!(rep.gains[1].distance_sq, 0.25 * spec.horizon, epsilon = 1e-9);
    }

    #[test]
    fn cooperative_mode_rejects_measure_dependent_drift() {
        let spec = lookup_builtin("lq-2pop-cooperative", &BuiltinParams::new().with("cross_drift", 0.3)).unwrap();
        let r = nash_precondition(&spec, NashMode::Cooperative, 0, true, 1);
        assert!(matches!(r, Err(NagentError::Precondition { .. })), "{r:?}");
        assert!(nash_precondition(&spec, NashMode::Cooperative, 0, false, 1).is_ok());
        let fine = lookup_builtin("lq-2pop-cooperative", &BuiltinParams::new()).unwrap();
        assert!(nash_precondition(&fine, NashMode::Cooperative, 0, true, 1).is_ok());
    }

    #[test]
    fn modes_must_match_cooperation() {
        let comp = lookup_builtin("lq-2pop-competitive", &BuiltinParams::new()).unwrap();
        let mixed = lookup_builtin("mixed-opec", &BuiltinParams::new()).unwrap();
        assert!(matches!(
            nash_precondition(&comp, NashMode::Cooperative, 0, false, 1),
            Err(NagentError::Mode { .. })
        ));
        assert!(matches!(
            nash_precondition(&mixed, NashMode::Competitive, 0, false, 1),
            Err(NagentError::Mode { .. })
        ));
        assert_eq!(nash_precondition(&mixed, NashMode::MixedSetup1, 0, true, 1).unwrap(), 0);
        assert_eq!(nash_precondition(&mixed, NashMode::MixedSetup2, 0, true, 1).unwrap(), 1);
    }

    #[test]
    fn open_loop_null_deviation_replays_the_copy_controls() {
        let spec = lookup_builtin("lq-1pop", &BuiltinParams::new()).unwrap();
        let eq = solve(&spec);
        let copies = simulate_iid_copies(&spec, &eq, &[6], 8).unwrap();
        let setup = AgentSetup {
            open_loop: true,
            ..AgentSetup::new(vec![6], true)
        };
        let sys = simulate_agents(&spec, &eq, &setup, 8).unwrap();
        assert_eq!(sys.controls, copies.controls);
    }

    #[test]
    fn nonconverged_equilibria_are_refused() {
        let spec = lookup_builtin("lq-1pop", &BuiltinParams::new()).unwrap();
        let fp = FixedPointConfig {
            fp_tol: 1e-12,
            max_iter: 1,
            ..FixedPointConfig::default()
        };
        let eq = solve_matching(&spec, &small_cfg(), &fp, 5).unwrap();
        assert!(!eq.converged);
        assert!(matches!(
            simulate_interacting(&spec, &eq, &[4], 1),
            Err(NagentError::NotConverged { .. })
        ));
        let setup = AgentSetup {
            allow_nonconverged: true,
            ..AgentSetup::new(vec![4], true)
        };
        assert!(simulate_agents(&spec, &eq, &setup, 1).is_ok());
    }

    #[test]
    fn log_log_fit_recovers_a_power_law() {
        let xs = [10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        let fit = LogLogFit::fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }
}
