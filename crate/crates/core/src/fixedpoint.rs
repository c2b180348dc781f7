//! Matching problems: damped fixed-point iteration of the map
//! `Φ: (μ¹, …, μᵐ) ↦ (L(X̂¹), …, L(X̂ᵐ))`.
//!
//! Each evaluation of `Φ` solves every population's adjoint system against
//! the frozen flows (competitive or McKean–Vlasov according to its flag) and
//! returns the empirical laws of the optimal states. All evaluations reuse
//! the same initial draws and Brownian increments, so `Φ` is a deterministic
//! map of the flows and the iteration residual is not swamped by Monte Carlo
//! noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::{
    optimal_cost, sample_inputs, solve_adjoint, CostEstimate, DecouplingField, FbsdeError, FbsdeSolution,
    FrozenLaws, SolverConfig,
};
use crate::hamiltonian::{HamiltonianError, KnotHamiltonian};
use crate::measures::{flow_distance, MeasureError, MeasureFlow, ParticleCloud, TimeGrid};
use crate::model::{GameSpec, MeasureContext, Vector};
use crate::rng::SeedStream;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Stop when the largest flow distance is at most `fp_tol · max(1, M_2 scale)`.
    pub fp_tol: f64,
    /// Maximum number of evaluations of `Φ`.
    pub max_iter: usize,
    /// Initial mixing weight `θ` of the new flow.
    pub damping: f64,
    /// Start each inner Picard iteration from the previous decoupling field.
    pub warm_start: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            fp_tol: 1e-3,
            max_iter: 30,
            damping: 0.5,
            warm_start: false,
        }
    }
}

impl FixedPointConfig {
    pub fn check(&self) -> Result<(), FixedPointError> {
        if !(self.fp_tol > 0.0) {
            return Err(FixedPointError::Config("fp_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(FixedPointError::Config("max_iter must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(FixedPointError::Config("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error("invalid fixed-point configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(FbsdeError),
    #[error("population {population} failed in fixed-point iteration {iteration}: {source}")]
    Inner {
        population: usize,
        iteration: usize,
        #[source]
        source: FbsdeError,
    },
    #[error("uncontrolled initialization failed for population {population} at knot {knot}: {source}")]
    Initialization {
        population: usize,
        knot: usize,
        #[source]
        source: HamiltonianError,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// One evaluation of `Φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `flow_distance(μⁱ, Φ(μ)ⁱ)` per population.
    pub deltas: Vec<f64>,
    pub delta: f64,
    /// Mixing weight applied after this evaluation.
    pub theta: f64,
    pub costs: Vec<CostEstimate>,
    /// Inner Picard sweeps per population.
    pub sweeps: Vec<usize>,
}

/// `φ_n` bookkeeping of a truncated solve.
#[derive(Debug, Clone)]
pub struct TruncationInfo {
    pub level: f64,
    /// Knots where `M_2` of the frozen flow exceeded the level, per population.
    pub binding_knots: Vec<Vec<usize>>,
    /// The truncated flows seen by the designated coefficients in the last evaluation.
    pub truncated_flows: Vec<MeasureFlow>,
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub model: String,
    pub seed: u64,
    /// Always `"uncontrolled"`: the iteration starts from the dynamics under the anchor control.
    pub initialization: String,
    /// Output of the last `Φ` evaluation; equal to the laws of `solutions` at every knot.
    pub flows: Vec<MeasureFlow>,
    /// Flows the final solutions were computed against.
    pub input_flows: Vec<MeasureFlow>,
    pub solutions: Vec<FbsdeSolution>,
    /// Number of flow updates; the evaluation that confirms convergence is not counted.
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub costs: Vec<CostEstimate>,
    pub converged: bool,
    /// Stopping threshold actually used, `fp_tol · max(1, M_2 scale)`.
    pub threshold: f64,
    pub truncation: Option<TruncationInfo>,
}

impl EquilibriumReport {
    pub fn final_delta(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.delta)
    }

    /// Geometric rate of the residuals after `burn_in` evaluations, from a
    /// least-squares fit of `ln δ` against the iteration index.
    pub fn contraction_ratio(&self, burn_in: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .history
            .iter()
            .skip(burn_in)
            .filter(|r| r.delta > 0.0)
            .map(|r| (r.iteration as f64, r.delta.ln()))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some((sxy / sxx).exp())
    }

    pub fn fields(&self) -> Vec<&DecouplingField> {
        self.solutions.iter().map(|s| &s.field).collect()
    }

    /// Frozen laws matching the final solutions.
    pub fn frozen_laws(&self) -> Result<FrozenLaws, MeasureError> {
        match &self.truncation {
            Some(t) => FrozenLaws::truncated(self.input_flows.clone(), t.level),
            None => Ok(FrozenLaws::new(self.input_flows.clone())),
        }
    }
}

fn frozen(flows: Vec<MeasureFlow>, level: Option<f64>) -> Result<FrozenLaws, MeasureError> {
    match level {
        Some(n) => FrozenLaws::truncated(flows, n),
        None => Ok(FrozenLaws::new(flows)),
    }
}

/// Joint Euler simulation of all populations under the anchor control, each
/// population's coefficients reading the current empirical clouds.
pub fn uncontrolled_flows(
    spec: &GameSpec,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<MeasureFlow>, FixedPointError> {
    let m = spec.n_populations();
    let d = spec.state_dim();
    let dt = grid.dt();
    let steps = grid.steps();
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..m).map(|i| sample_inputs(spec, i, grid, n, seed)).collect();
    let mut current: Vec<Vec<f64>> = inputs.iter().map(|(x0, _)| x0.clone()).collect();
    let mut clouds: Vec<Vec<ParticleCloud>> = vec![Vec::with_capacity(steps + 1); m];
    for k in 0..=steps {
        let step: Vec<ParticleCloud> = current
            .iter()
            .map(|pts| ParticleCloud::new(d, pts.clone()))
            .collect::<Result<_, _>>()?;
        if k < steps {
            let refs: Vec<&ParticleCloud> = step.iter().collect();
            let mut next = Vec::with_capacity(m);
            for i in 0..m {
                let pop = spec.population(i);
                let ctx = MeasureContext::for_population(grid.time(k), i, &refs);
                let ham = KnotHamiltonian::new(pop, ctx, None, spec.constants).map_err(|source| {
                    FixedPointError::Initialization {
                        population: i,
                        knot: k,
                        source,
                    }
                })?;
                let anchor = pop.actions.anchor();
                let noise = &inputs[i].1;
                let xs = &current[i];
                let moved: Vec<Vector> = (0..n)
                    .into_par_iter()
                    .map(|p| {
                        let x = Vector::from_column_slice(&xs[p * d..(p + 1) * d]);
                        let base = (p * steps + k) * d;
                        let dw = Vector::from_column_slice(&noise[base..base + d]);
                        &x + ham.drift(&x, anchor) * dt + ham.sigma(&x) * dw
                    })
                    .collect();
                next.push(moved.iter().flat_map(|v| v.iter().copied()).collect::<Vec<f64>>());
            }
            current = next;
        }
        for (i, c) in step.into_iter().enumerate() {
            clouds[i].push(c);
        }
    }
    clouds
        .into_iter()
        .map(|c| MeasureFlow::new(*grid, c).map_err(FixedPointError::from))
        .collect()
}

/// One evaluation of `Φ`: every population solved against `flows`.
pub fn apply_phi(
    spec: &GameSpec,
    flows: &[MeasureFlow],
    truncation: Option<f64>,
    cfg: &SolverConfig,
    seed: u64,
    warm: Option<&[&DecouplingField]>,
) -> Result<Vec<FbsdeSolution>, FixedPointError> {
    apply_phi_at(spec, &frozen(flows.to_vec(), truncation)?, cfg, seed, warm, 0)
}

fn apply_phi_at(
    spec: &GameSpec,
    laws: &FrozenLaws,
    cfg: &SolverConfig,
    seed: u64,
    warm: Option<&[&DecouplingField]>,
    iteration: usize,
) -> Result<Vec<FbsdeSolution>, FixedPointError> {
    let results: Vec<Result<FbsdeSolution, FbsdeError>> = (0..spec.n_populations())
        .into_par_iter()
        .map(|i| solve_adjoint(spec, i, laws, cfg, seed, warm.map(|w| w[i])))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(population, r)| {
            r.map_err(|source| FixedPointError::Inner {
                population,
                iteration,
                source,
            })
        })
        .collect()
}

/// Mixture `(1 − θ) old + θ new`: each particle index takes its value from
/// `new` with probability `θ`, the same choice at every knot.
fn mix_flows(old: &MeasureFlow, new: &MeasureFlow, theta: f64, stream: SeedStream) -> Result<MeasureFlow, MeasureError> {
    let n = old.at(0).len();
    let mut rng = stream.rng();
    let take_new: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < theta).collect();
    old.map_clouds(|k, c| {
        let d = c.dim();
        let fresh = new.at(k);
        let mut pts = Vec::with_capacity(n * d);
        for (p, &t) in take_new.iter().enumerate() {
            pts.extend_from_slice(if t { fresh.point(p) } else { c.point(p) });
        }
        ParticleCloud::new(d, pts)
    })
}

fn moment_scale(flows: &[MeasureFlow]) -> f64 {
    flows
        .iter()
        .flat_map(|f| f.clouds().iter().map(ParticleCloud::moment2))
        .fold(1.0, f64::max)
}

/// Solves the matching problem of `spec` by damped iteration of `Φ`.
///
/// Non-convergence is reported through `converged`, not as an error.
pub fn solve_matching(
    spec: &GameSpec,
    cfg: &SolverConfig,
    fp: &FixedPointConfig,
    seed: u64,
) -> Result<EquilibriumReport, FixedPointError> {
    iterate(spec, cfg, fp, seed, None)
}

/// [`solve_matching`] with every measure argument of `b0`, `b2`, `s0` and the
/// costs passed through `φ_n`, so the control is `α̂(t, x, φ_n∘μ, φ_n∘ν, y)`.
pub fn truncated_solve(
    spec: &GameSpec,
    level: f64,
    cfg: &SolverConfig,
    fp: &FixedPointConfig,
    seed: u64,
) -> Result<EquilibriumReport, FixedPointError> {
    if !(level > 0.0) {
        return Err(FixedPointError::Measure(MeasureError::TruncationLevel(level)));
    }
    iterate(spec, cfg, fp, seed, Some(level))
}

fn iterate(
    spec: &GameSpec,
    cfg: &SolverConfig,
    fp: &FixedPointConfig,
    seed: u64,
    level: Option<f64>,
) -> Result<EquilibriumReport, FixedPointError> {
    fp.check()?;
    cfg.check().map_err(FixedPointError::Solver)?;
    let grid = cfg.grid(spec.horizon).map_err(FixedPointError::Solver)?;
    let m = spec.n_populations();
    let mix_stream = SeedStream::new(seed).named("fixedpoint");

    let mut flows = uncontrolled_flows(spec, &grid, cfg.n_paths, seed)?;
    let mut theta = fp.damping;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut converged = false;
    let mut threshold = fp.fp_tol;
    let mut last: Option<(Vec<FbsdeSolution>, FrozenLaws, Vec<MeasureFlow>)> = None;

    for it in 0..fp.max_iter {
        let laws = frozen(flows.clone(), level)?;
        let warm: Option<Vec<&DecouplingField>> = match (&last, fp.warm_start) {
            (Some((sols, _, _)), true) => Some(sols.iter().map(|s| &s.field).collect()),
            _ => None,
        };
        let sols = apply_phi_at(spec, &laws, cfg, seed, warm.as_deref(), it)?;
        let new: Vec<MeasureFlow> = sols.iter().map(FbsdeSolution::law_flow).collect();
        let deltas = flows
            .iter()
            .zip(&new)
            .map(|(a, b)| flow_distance(a, b))
            .collect::<Result<Vec<f64>, _>>()?;
        let delta = deltas.iter().copied().fold(0.0, f64::max);
        let costs = sols
            .iter()
            .enumerate()
            .map(|(i, s)| optimal_cost(s, spec, i, &laws))
            .collect::<Result<Vec<_>, _>>()
            .map_err(FixedPointError::Solver)?;
        threshold = fp.fp_tol * moment_scale(&new);

        // halve θ once the residual has grown twice in a row
        let n_hist = history.len();
        if n_hist >= 2 && delta > history[n_hist - 1].delta && history[n_hist - 1].delta > history[n_hist - 2].delta {
            theta *= 0.5;
        }
        history.push(IterationRecord {
            iteration: it,
            deltas,
            delta,
            theta,
            costs,
            sweeps: sols.iter().map(|s| s.picard_history.len()).collect(),
        });
        let done = delta <= threshold;
        let input = std::mem::take(&mut flows);
        if done {
            converged = true;
            last = Some((sols, laws, input));
            break;
        }
        // the first update is undamped: the uncontrolled start carries no information
        flows = if it == 0 {
            new.clone()
        } else {
            input
                .iter()
                .zip(&new)
                .enumerate()
                .map(|(i, (old, fresh))| mix_flows(old, fresh, theta, mix_stream.index(it as u64).index(i as u64)))
                .collect::<Result<Vec<_>, _>>()?
        };
        last = Some((sols, laws, input));
    }

    let (solutions, laws, input_flows) = last.expect("max_iter is positive");
    let out_flows: Vec<MeasureFlow> = solutions.iter().map(FbsdeSolution::law_flow).collect();
    let costs = history.last().map(|r| r.costs.clone()).unwrap_or_default();
    let truncation = level.map(|n| TruncationInfo {
        level: n,
        binding_knots: input_flows
            .iter()
            .map(|f| {
                f.clouds()
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.moment2() > n)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect(),
        truncated_flows: laws.cost_flows().to_vec(),
    });
    debug_assert_eq!(out_flows.len(), m);
    let iterations = if converged { history.len() - 1 } else { history.len() };
    Ok(EquilibriumReport {
        model: spec.name.clone(),
        seed,
        initialization: "uncontrolled".into(),
        flows: out_flows,
        input_flows,
        solutions,
        iterations,
        history,
        costs,
        converged,
        threshold,
        truncation,
    })
}
