//! Cost functionals, policy rollouts and the sufficiency check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{HamiltonianError, KnotHamiltonian};
use crate::measures::TimeGrid;
use crate::model::{GameSpec, Vector};
use crate::rng::SeedStream;

use super::{first_error, par_map, FbsdeError, FbsdeSolution, FrozenLaws, Problem};

/// Allowance for discretization and regression bias in cost comparisons.
pub const SUFFICIENCY_BIAS_TOL: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() < 2 {
            return Self { mean, std_error: 0.0 };
        }
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// States, controls and per-path costs of one simulated policy.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub path_costs: Vec<f64>,
}

/// Simulates population `i` under `policy(k, p, x, H_k)` on the given draws.
///
/// Cooperative populations see the law of the simulated cloud itself;
/// competitive ones see the frozen flows. Costs use trapezoidal weights.
pub fn simulate_policy<P>(
    spec: &GameSpec,
    i: usize,
    laws: &FrozenLaws,
    grid: &TimeGrid,
    x0: &[f64],
    noise: &[f64],
    policy: P,
) -> Result<Rollout, FbsdeError>
where
    P: Fn(usize, usize, &Vector, &KnotHamiltonian) -> Result<Vector, HamiltonianError> + Sync,
{
    let problem = Problem::new(spec, i, laws, *grid)?;
    let d = problem.dim();
    let n = x0.len() / d;
    let steps = grid.steps();
    let dt = grid.dt();
    let mut xs = vec![x0.to_vec()];
    let mut alphas = Vec::with_capacity(steps + 1);
    let mut costs = vec![0.0; n];
    for k in 0..=steps {
        let own = if problem.mkv { Some(problem.own_law(&xs[k])?) } else { None };
        let ham = problem.hamiltonian(k, own.as_ref())?;
        let xk = &xs[k];
        let w = grid.trapezoid_weight(k) * dt;
        let out = first_error(par_map(n, |p| {
            let x = Vector::from_column_slice(&xk[p * d..(p + 1) * d]);
            let a = policy(k, p, &x, &ham)?;
            let mut c = w * ham.running_cost(&x, &a);
            let next = if k < steps {
                let base = (p * steps + k) * d;
                let dw = Vector::from_column_slice(&noise[base..base + d]);
                Some(&x + ham.drift(&x, &a) * dt + ham.sigma(&x) * dw)
            } else {
                c += ham.terminal_cost(&x);
                None
            };
            Ok((a, next, c))
        }))
        .map_err(|source| FbsdeError::Hamiltonian { knot: k, source })?;
        let mut a_buf = Vec::new();
        let mut x_buf: Vec<f64> = Vec::new();
        for (p, (a, next, c)) in out.into_iter().enumerate() {
            a_buf.extend(a.iter());
            if let Some(v) = next {
                x_buf.extend(v.iter());
            }
            costs[p] += c;
        }
        alphas.push(a_buf);
        if k < steps {
            if x_buf.iter().any(|v| !v.is_finite()) {
                return Err(FbsdeError::Diverged { history: Vec::new() });
            }
            xs.push(x_buf);
        }
    }
    Ok(Rollout {
        x: xs,
        alpha: alphas,
        path_costs: costs,
    })
}

/// Per-path `∫ f dt + g` over the solution's stored paths.
pub fn path_costs(sol: &FbsdeSolution, spec: &GameSpec, i: usize, laws: &FrozenLaws) -> Result<Vec<f64>, FbsdeError> {
    let problem = Problem::new(spec, i, laws, sol.grid)?;
    let grid = sol.grid;
    let n = sol.n_paths;
    let mut costs = vec![0.0; n];
    for k in 0..grid.knots() {
        let own = if problem.mkv { Some(problem.own_law(&sol.x[k])?) } else { None };
        let ham = problem.hamiltonian(k, own.as_ref())?;
        let w = grid.trapezoid_weight(k) * grid.dt();
        let last = k == grid.steps();
        let vals = par_map(n, |p| {
            let x = sol.x_at(k, p);
            let mut c = w * ham.running_cost(&x, &sol.alpha_at(k, p));
            if last {
                c += ham.terminal_cost(&x);
            }
            c
        });
        for (c, v) in costs.iter_mut().zip(vals) {
            *c += v;
        }
    }
    Ok(costs)
}

/// Monte Carlo estimate of `J_i` on the solution's paths.
pub fn optimal_cost(sol: &FbsdeSolution, spec: &GameSpec, i: usize, laws: &FrozenLaws) -> Result<CostEstimate, FbsdeError> {
    Ok(CostEstimate::from_samples(&path_costs(sol, spec, i, laws)?))
}

/// Bounded adapted perturbation `δ` of the optimal feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `β = α̂ + c`.
    Constant { shift: Vec<f64> },
    /// `β = α̂ + a + b cos(ω t) + c tanh(x)`, coordinate `j` reading `x_{j mod d}`.
    Smooth {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        omega: f64,
    },
    /// `β = −α̂`.
    SignFlip,
}

impl Perturbation {
    /// Member `j` of the deviation family: every eighth is a sign flip, the
    /// others alternate between constant and smooth state-dependent shifts.
    pub fn sample(j: usize, control_dim: usize, stream: SeedStream) -> Self {
        let mut rng = stream.index(j as u64).rng();
        let mut draw = |half: f64| (0..control_dim).map(|_| rng.random_range(-half..half)).collect::<Vec<f64>>();
        if j % 8 == 7 {
            Perturbation::SignFlip
        } else if j % 2 == 0 {
            Perturbation::Constant { shift: draw(0.5) }
        } else {
            let a = draw(0.3);
            let b = draw(0.3);
            let c = draw(0.3);
            let omega = 1.0 + 5.0 * rng.random::<f64>();
            Perturbation::Smooth { a, b, c, omega }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Perturbation::Constant { .. } => "constant",
            Perturbation::Smooth { .. } => "smooth",
            Perturbation::SignFlip => "sign_flip",
        }
    }

    pub fn apply(&self, t: f64, x: &Vector, alpha: &Vector) -> Vector {
        match self {
            Perturbation::Constant { shift } => alpha + Vector::from_column_slice(shift),
            Perturbation::Smooth { a, b, c, omega } => {
                let d = x.len();
                Vector::from_fn(alpha.len(), |j, _| {
                    alpha[j] + a[j] + b[j] * (omega * t).cos() + c[j] * x[j % d].tanh()
                })
            }
            Perturbation::SignFlip => -alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationGap {
    pub perturbation: Perturbation,
    /// Mean of `J(β) − J(α̂) − λ ∫ |β − α̂|²` over paths.
    pub gap: f64,
    pub std_error: f64,
    pub cost_difference: f64,
    /// `E ∫ |β − α̂|² dt`.
    pub distance_sq: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub population: usize,
    pub lambda: f64,
    pub baseline: CostEstimate,
    pub deviations: Vec<DeviationGap>,
    pub min_margin: f64,
    pub passed: bool,
}

fn feedback<'s>(
    sol: &'s FbsdeSolution,
) -> impl Fn(usize, usize, &Vector, &KnotHamiltonian) -> Result<Vector, HamiltonianError> + Sync + 's {
    move |k, _p, x, ham| ham.minimize(x, &sol.field.eval(k, x))
}

fn rollout_optimal(sol: &FbsdeSolution, spec: &GameSpec, i: usize, laws: &FrozenLaws) -> Result<Rollout, FbsdeError> {
    simulate_policy(spec, i, laws, &sol.grid, &sol.x0, &sol.noise, feedback(sol))
}

fn gap_against(
    base: &Rollout,
    sol: &FbsdeSolution,
    spec: &GameSpec,
    i: usize,
    laws: &FrozenLaws,
    perturbation: &Perturbation,
) -> Result<DeviationGap, FbsdeError> {
    let grid = sol.grid;
    let actions = &spec.population(i).actions;
    let u = feedback(sol);
    let dev = simulate_policy(spec, i, laws, &grid, &sol.x0, &sol.noise, |k, p, x, ham| {
        let a = u(k, p, x, ham)?;
        Ok(actions.project(&perturbation.apply(grid.time(k), x, &a)))
    })?;
    let lambda = spec.constants.convexity_lambda;
    let kd = sol.control_dim;
    let n = sol.n_paths;
    let mut gaps = Vec::with_capacity(n);
    let mut diffs = Vec::with_capacity(n);
    let mut dist = 0.0;
    for p in 0..n {
        let mut sq = 0.0;
        for k in 0..grid.knots() {
            let w = grid.trapezoid_weight(k) * grid.dt();
            for j in 0..kd {
                sq += w * (dev.alpha[k][p * kd + j] - base.alpha[k][p * kd + j]).powi(2);
            }
        }
        let diff = dev.path_costs[p] - base.path_costs[p];
        diffs.push(diff);
        gaps.push(diff - lambda * sq);
        dist += sq;
    }
    let est = CostEstimate::from_samples(&gaps);
    let passed = est.mean >= -(3.0 * est.std_error + SUFFICIENCY_BIAS_TOL);
    Ok(DeviationGap {
        perturbation: perturbation.clone(),
        gap: est.mean,
        std_error: est.std_error,
        cost_difference: CostEstimate::from_samples(&diffs).mean,
        distance_sq: dist / n as f64,
        passed,
    })
}

/// Gap of a single perturbation, with common random numbers.
pub fn deviation_gap(
    spec: &GameSpec,
    i: usize,
    laws: &FrozenLaws,
    sol: &FbsdeSolution,
    perturbation: &Perturbation,
) -> Result<DeviationGap, FbsdeError> {
    let base = rollout_optimal(sol, spec, i, laws)?;
    gap_against(&base, sol, spec, i, laws, perturbation)
}

/// Checks `J(β) ≥ J(α̂) + λ‖β − α̂‖²` on `count` members of the deviation family.
pub fn verify_sufficiency(
    spec: &GameSpec,
    i: usize,
    laws: &FrozenLaws,
    sol: &FbsdeSolution,
    count: usize,
    seed: u64,
) -> Result<SufficiencyReport, FbsdeError> {
    let base = rollout_optimal(sol, spec, i, laws)?;
    let stream = SeedStream::new(seed).named("sufficiency").index(i as u64);
    let mut deviations = Vec::with_capacity(count);
    for j in 0..count {
        let pert = Perturbation::sample(j, sol.control_dim, stream);
        deviations.push(gap_against(&base, sol, spec, i, laws, &pert)?);
    }
    let min_margin = deviations
        .iter()
        .map(|g| g.gap + 3.0 * g.std_error + SUFFICIENCY_BIAS_TOL)
        .fold(f64::INFINITY, f64::min);
    Ok(SufficiencyReport {
        population: i,
        lambda: spec.constants.convexity_lambda,
        baseline: CostEstimate::from_samples(&base.path_costs),
        passed: deviations.iter().all(|g| g.passed),
        deviations,
        min_margin,
    })
}
