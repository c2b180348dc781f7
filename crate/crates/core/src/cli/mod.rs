//! Command-line pipelines: configuration, orchestration and output files.
//!
//! Every command writes into one output directory:
//!
//! | file | commands |
//! |---|---|
//! | `config.resolved.toml` | all |
//! | `report.json` | all |
//! | `flows_<i>.csv` / `flows_<i>.bin` | all but validate |
//! | `history.csv`, `costs.json` | all but validate |
//! | `chaos.csv` | chaos |
//! | `nash.csv`, `cost_convergence.csv` | nash |
//! | `truncation.csv` | truncation-study |
//!
//! Outputs depend only on the configuration and the seed.

mod config;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::fbsde::CostEstimate;
use crate::fixedpoint::{solve_matching, truncated_solve, EquilibriumReport, FixedPointError};
use crate::measures::io::{flow_table, format_f64, write_table_binary, write_table_csv, IoError, Table};
use crate::measures::{flow_distance, MeasureError};
use crate::model::{validate_game, Cooperation, GameSpec, ModelError, ValidationReport};
use crate::nagent::{chaos_rate, cost_convergence, nash_gap, ChaosReport, CostConvergenceReport, NagentError, NashGapReport};

pub use config::{
    BoxFile, Experiment, ExperimentConfig, FlowFormat, InitialLawFile, LqCouplingFile, LqGameFile, LqPopulationFile,
    ModelRef, NashExperiment, OutputConfig, Seed, SolveExperiment, TruncationExperiment, ValidateExperiment,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Nagent(#[from] NagentError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("cannot write output: {0}")]
    Output(#[from] IoError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot write output: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot build the worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Solve,
    Chaos,
    Nash,
    TruncationStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Solve => "solve",
            Command::Chaos => "chaos",
            Command::Nash => "nash",
            Command::TruncationStudy => "truncation-study",
        }
    }

    fn default_experiment(self) -> Experiment {
        match self {
            Command::Validate => Experiment::Validate(Default::default()),
            Command::Solve => Experiment::Solve(Default::default()),
            Command::Chaos => Experiment::Chaos(Default::default()),
            Command::Nash => Experiment::Nash(Default::default()),
            Command::TruncationStudy => Experiment::TruncationStudy(Default::default()),
        }
    }
}

/// Command-line flags that override the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub allow_nonconverged: bool,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// 0 on success, 1 when a check failed, the solve did not converge, or a fit is invalid.
    pub exit_code: i32,
    pub summary: String,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Applies the overrides and fills in the experiment block for `command`.
pub fn resolve(command: Command, mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    if let Some(seed) = overrides.seed {
        cfg.seed = Seed(seed);
    }
    if let Some(out) = &overrides.out {
        cfg.out = Some(out.clone());
    }
    cfg.allow_nonconverged |= overrides.allow_nonconverged;
    match &cfg.experiment {
        Some(e) if e.kind() != command.name() => {
            return Err(CliError::Config(format!(
                "the config describes a {:?} experiment but the command is {:?}",
                e.kind(),
                command.name()
            )))
        }
        Some(_) => {}
        None => cfg.experiment = Some(command.default_experiment()),
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("out").join(command.name()));
    }
    cfg.solver.check().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.fixed_point.check()?;
    Ok(cfg)
}

/// Runs `command` on a rayon pool of `workers` threads (the global pool when `None`).
pub fn run_with_workers(
    command: Command,
    cfg: ExperimentConfig,
    overrides: &Overrides,
    workers: Option<usize>,
) -> Result<Outcome, CliError> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?;
            pool.install(|| run(command, cfg, overrides))
        }
        None => run(command, cfg, overrides),
    }
}

pub fn run(command: Command, cfg: ExperimentConfig, overrides: &Overrides) -> Result<Outcome, CliError> {
    let cfg = resolve(command, cfg, overrides)?;
    let spec = cfg.model.build()?;
    let out = Output::new(cfg.out.clone().expect("resolved"))?;
    // the output location is not part of the experiment
    let resolved = ExperimentConfig { out: None, ..cfg.clone() };
    out.text("config.resolved.toml", &resolved.to_toml()?)?;
    let seed = cfg.seed.0;
    let allow = cfg.allow_nonconverged;
    match cfg.experiment.clone().expect("resolved") {
        Experiment::Validate(v) => cmd_validate(&spec, &v, seed, out),
        Experiment::Solve(s) => cmd_solve(&spec, &cfg, s.truncation, out),
        Experiment::Chaos(mut opts) => {
            opts.allow_nonconverged |= allow;
            let (eq, summary) = equilibrium(&spec, &cfg, None, &out)?;
            let report = chaos_rate(&spec, &eq, &opts, seed)?;
            cmd_chaos(report, summary, out)
        }
        Experiment::Nash(n) => {
            let (eq, summary) = equilibrium(&spec, &cfg, None, &out)?;
            let report = nash_gap(&spec, &eq, &n.options(allow), seed)?;
            let costs = if n.cost_sizes.is_empty() {
                None
            } else {
                Some(cost_convergence(&spec, &eq, &n.cost_sizes, n.cost_repetitions, seed)?)
            };
            cmd_nash(report, costs, summary, out)
        }
        Experiment::TruncationStudy(t) => cmd_truncation_study(&spec, &cfg, &t, out),
    }
}

struct Output {
    dir: PathBuf,
    files: std::cell::RefCell<Vec<PathBuf>>,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            files: Default::default(),
        })
    }

    fn create(&self, name: &str) -> Result<fs::File, CliError> {
        let path = self.dir.join(name);
        let file = fs::File::create(&path)?;
        self.files.borrow_mut().push(path);
        Ok(file)
    }

    fn text(&self, name: &str, text: &str) -> Result<(), CliError> {
        self.create(name)?.write_all(text.as_bytes())?;
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn table(&self, name: &str, table: &Table) -> Result<(), CliError> {
        write_table_csv(table, std::io::BufWriter::new(self.create(name)?))?;
        Ok(())
    }

    fn finish(self, exit_code: i32, summary: String) -> Outcome {
        Outcome {
            exit_code,
            summary,
            out_dir: self.dir,
            files: self.files.into_inner(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PopulationCost {
    pub population: usize,
    pub name: String,
    pub cooperation: Cooperation,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationSummary {
    pub level: f64,
    pub binding_knots: Vec<Vec<usize>>,
}

/// JSON summary of an equilibrium solve.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSummary {
    pub model: String,
    pub seed: u64,
    pub initialization: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_delta: f64,
    pub threshold: f64,
    /// Geometric rate of the residuals after the first two evaluations.
    pub contraction_ratio: Option<f64>,
    pub costs: Vec<PopulationCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationSummary>,
}

fn summarize(spec: &GameSpec, eq: &EquilibriumReport) -> EquilibriumSummary {
    EquilibriumSummary {
        model: eq.model.clone(),
        seed: eq.seed,
        initialization: eq.initialization.clone(),
        converged: eq.converged,
        iterations: eq.iterations,
        final_delta: eq.final_delta(),
        threshold: eq.threshold,
        contraction_ratio: eq.contraction_ratio(2),
        costs: eq
            .costs
            .iter()
            .enumerate()
            .map(|(i, c)| PopulationCost {
                population: i,
                name: spec.population(i).name.clone(),
                cooperation: spec.population(i).cooperation,
                mean: c.mean,
                std_error: c.std_error,
            })
            .collect(),
        truncation: eq.truncation.as_ref().map(|t| TruncationSummary {
            level: t.level,
            binding_knots: t.binding_knots.clone(),
        }),
    }
}

fn history_table(eq: &EquilibriumReport) -> Table {
    let m = eq.costs.len();
    let mut names = vec!["iteration".to_string(), "delta".into(), "theta".into()];
    let mut columns: Vec<Vec<f64>> = vec![
        eq.history.iter().map(|r| r.iteration as f64).collect(),
        eq.history.iter().map(|r| r.delta).collect(),
        eq.history.iter().map(|r| r.theta).collect(),
    ];
    for i in 0..m {
        names.extend([
            format!("delta_{i}"),
            format!("cost_{i}"),
            format!("cost_se_{i}"),
            format!("sweeps_{i}"),
        ]);
        columns.push(eq.history.iter().map(|r| r.deltas[i]).collect());
        columns.push(eq.history.iter().map(|r| r.costs[i].mean).collect());
        columns.push(eq.history.iter().map(|r| r.costs[i].std_error).collect());
        columns.push(eq.history.iter().map(|r| r.sweeps[i] as f64).collect());
    }
    Table::new(names, columns).expect("equal-length history columns")
}

fn write_equilibrium(spec: &GameSpec, eq: &EquilibriumReport, format: FlowFormat, out: &Output) -> Result<(), CliError> {
    for (i, flow) in eq.flows.iter().enumerate() {
        let table = flow_table(flow);
        match format {
            FlowFormat::Csv => out.table(&format!("flows_{i}.csv"), &table)?,
            FlowFormat::Binary => {
                write_table_binary(&table, std::io::BufWriter::new(out.create(&format!("flows_{i}.bin"))?))?
            }
        }
    }
    out.table("history.csv", &history_table(eq))?;
    out.json("costs.json", &summarize(spec, eq).costs)?;
    Ok(())
}

fn solve(spec: &GameSpec, cfg: &ExperimentConfig, truncation: Option<f64>) -> Result<EquilibriumReport, CliError> {
    Ok(match truncation {
        Some(level) => truncated_solve(spec, level, &cfg.solver, &cfg.fixed_point, cfg.seed.0)?,
        None => solve_matching(spec, &cfg.solver, &cfg.fixed_point, cfg.seed.0)?,
    })
}

fn equilibrium(
    spec: &GameSpec,
    cfg: &ExperimentConfig,
    truncation: Option<f64>,
    out: &Output,
) -> Result<(EquilibriumReport, EquilibriumSummary), CliError> {
    let eq = solve(spec, cfg, truncation)?;
    write_equilibrium(spec, &eq, cfg.output.flows_format, out)?;
    let summary = summarize(spec, &eq);
    Ok((eq, summary))
}

fn cmd_validate(spec: &GameSpec, v: &ValidateExperiment, seed: u64, out: Output) -> Result<Outcome, CliError> {
    let report: ValidationReport = validate_game(spec, v.samples, seed)?;
    out.json("report.json", &report)?;
    let failures = report.failures();
    let mut summary = format!(
        "{}: {} checks, {} failed",
        report.model,
        report.checks.len(),
        failures.len()
    );
    for f in &failures {
        summary.push_str(&format!("\n  {} (population {:?}): {}", f.name, f.population, f.detail));
    }
    Ok(out.finish(i32::from(!report.passed()), summary))
}

fn cmd_solve(spec: &GameSpec, cfg: &ExperimentConfig, truncation: Option<f64>, out: Output) -> Result<Outcome, CliError> {
    let (_, summary) = equilibrium(spec, cfg, truncation, &out)?;
    out.json("report.json", &summary)?;
    let text = format!(
        "{}: converged={} after {} updates, final delta {:.3e} (threshold {:.3e})",
        summary.model, summary.converged, summary.iterations, summary.final_delta, summary.threshold
    );
    let code = i32::from(!(summary.converged || cfg.allow_nonconverged));
    Ok(out.finish(code, text))
}

#[derive(Serialize)]
struct ChaosOutput {
    equilibrium: EquilibriumSummary,
    chaos: ChaosReport,
}

fn cmd_chaos(report: ChaosReport, equilibrium: EquilibriumSummary, out: Output) -> Result<Outcome, CliError> {
    let p = &report.points;
    let table = Table::new(
        vec!["n".into(), "estimate".into(), "std_error".into(), "knot".into(), "epsilon_sq".into()],
        vec![
            p.iter().map(|q| q.n as f64).collect(),
            p.iter().map(|q| q.estimate).collect(),
            p.iter().map(|q| q.std_error).collect(),
            p.iter().map(|q| q.knot as f64).collect(),
            p.iter().map(|q| q.epsilon_sq).collect(),
        ],
    )?;
    out.table("chaos.csv", &table)?;
    let summary = match &report.fit {
        Some(f) => format!(
            "chaos: slope {:.3} (theory {:.3}), R² {:.3}",
            f.slope, report.theory_slope, f.r_squared
        ),
        None => "chaos: no valid log-log fit".to_string(),
    };
    let code = i32::from(report.fit.is_none());
    out.json(
        "report.json",
        &ChaosOutput {
            equilibrium,
            chaos: report,
        },
    )?;
    Ok(out.finish(code, summary))
}

#[derive(Serialize)]
struct NashOutput {
    equilibrium: EquilibriumSummary,
    nash: NashGapReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_convergence: Option<CostConvergenceReport>,
}

fn cmd_nash(
    report: NashGapReport,
    costs: Option<CostConvergenceReport>,
    equilibrium: EquilibriumSummary,
    out: Output,
) -> Result<Outcome, CliError> {
    let mode = serde_json::to_value(report.mode)?;
    let mode = mode.as_str().unwrap_or_default().to_string();
    let mut w = csv::Writer::from_writer(out.create("nash.csv")?);
    w.write_record(["mode", "n", "deviation", "estimate", "std_error", "normalized", "distance_sq"])?;
    for g in &report.gains {
        w.write_record([
            mode.clone(),
            g.n.to_string(),
            g.deviation.clone(),
            format_f64(g.gain),
            format_f64(g.std_error),
            format_f64(g.normalized),
            format_f64(g.distance_sq),
        ])?;
    }
    w.flush()?;
    if let Some(c) = &costs {
        let mut w = csv::Writer::from_writer(out.create("cost_convergence.csv")?);
        w.write_record(["population", "n", "interacting", "copies", "gap", "std_error", "epsilon_sum"])?;
        for p in &c.points {
            w.write_record([
                p.population.to_string(),
                p.n.to_string(),
                format_f64(p.interacting.mean),
                format_f64(p.copies.mean),
                format_f64(p.gap),
                format_f64(p.std_error),
                format_f64(p.epsilon_sum),
            ])?;
        }
        w.flush()?;
    }
    // a fit needs at least three sizes
    let valid = report.sizes.len() >= 3;
    let summary = format!(
        "nash ({mode}): kappa {:.3e}, ratio {:.3} over sizes {:?}{}",
        report.kappa,
        report.kappa_ratio,
        report.sizes,
        if valid { "" } else { " (fewer than 3 sizes, no fit)" }
    );
    out.json(
        "report.json",
        &NashOutput {
            equilibrium,
            nash: report,
            cost_convergence: costs,
        },
    )?;
    Ok(out.finish(i32::from(!valid), summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationRow {
    pub level: f64,
    pub converged: bool,
    pub iterations: usize,
    pub binding_knots: usize,
    /// Largest flow distance to the untruncated equilibrium over populations.
    pub distance: f64,
    pub costs: Vec<CostEstimate>,
}

#[derive(Serialize)]
struct TruncationOutput {
    equilibrium: EquilibriumSummary,
    levels: Vec<TruncationRow>,
}

fn cmd_truncation_study(
    spec: &GameSpec,
    cfg: &ExperimentConfig,
    t: &TruncationExperiment,
    out: Output,
) -> Result<Outcome, CliError> {
    if t.levels.is_empty() {
        return Err(CliError::Config("experiment.levels is empty".into()));
    }
    let (base, equilibrium) = equilibrium(spec, cfg, None, &out)?;
    let mut rows = Vec::with_capacity(t.levels.len());
    for &level in &t.levels {
        let eq = solve(spec, cfg, Some(level))?;
        let mut distance: f64 = 0.0;
        for (a, b) in eq.flows.iter().zip(&base.flows) {
            distance = distance.max(flow_distance(a, b)?);
        }
        rows.push(TruncationRow {
            level,
            converged: eq.converged,
            iterations: eq.iterations,
            binding_knots: eq
                .truncation
                .as_ref()
                .map_or(0, |t| t.binding_knots.iter().map(Vec::len).sum()),
            distance,
            costs: eq.costs.clone(),
        });
    }
    let m = spec.n_populations();
    let mut names = vec![
        "level".to_string(),
        "converged".into(),
        "iterations".into(),
        "binding_knots".into(),
        "distance".into(),
    ];
    let mut columns: Vec<Vec<f64>> = vec![
        rows.iter().map(|r| r.level).collect(),
        rows.iter().map(|r| f64::from(u8::from(r.converged))).collect(),
        rows.iter().map(|r| r.iterations as f64).collect(),
        rows.iter().map(|r| r.binding_knots as f64).collect(),
        rows.iter().map(|r| r.distance).collect(),
    ];
    for i in 0..m {
        names.push(format!("cost_{i}"));
        columns.push(rows.iter().map(|r| r.costs[i].mean).collect());
    }
    out.table("truncation.csv", &Table::new(names, columns)?)?;
    let mut summary = String::from("truncation study (level: distance to untruncated)");
    for r in &rows {
        summary.push_str(&format!("\n  {:>10.3e}: {:.3e}", r.level, r.distance));
    }
    let code = i32::from(!(equilibrium.converged || cfg.allow_nonconverged));
    out.json(
        "report.json",
        &TruncationOutput {
            equilibrium,
            levels: rows,
        },
    )?;
    Ok(out.finish(code, summary))
}

