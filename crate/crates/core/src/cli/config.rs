//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! out = "runs/lq-1d"
//!
//! [model]
//! builtin = "lq-1d"
//! params = { sigma = 0.8 }
//!
//! [solver]
//! n_paths = 2048
//!
//! [fixed_point]
//! fp_tol = 1e-3
//!
//! [experiment]
//! kind = "chaos"
//! sizes = [64, 256, 1024]
//! ```
//!
//! Every table except `[model]` is optional. The model is either a builtin
//! (`builtin` plus `params` overrides), a separate LQ model file (`file`,
//! relative to the config), or an inline LQ model (`[model.lq]`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fbsde::SolverConfig;
use crate::fixedpoint::FixedPointConfig;
use crate::model::{
    lookup_builtin, lq_game, ActionSet, BuiltinParams, Cooperation, GameSpec, InitialLaw, LqCoupling, LqPopulation,
    Matrix, Vector,
};
use crate::nagent::{ChaosOptions, Deviation, NashMode, NashOptions};

use super::CliError;

/// Master seed; written as a TOML integer when it fits in `i64`, as a
/// decimal string otherwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Serialize for Seed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(self.0) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&self.0.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Seed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SeedVisitor;
        impl Visitor<'_> for SeedVisitor {
            type Value = Seed;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative integer or a decimal string")
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Seed, E> {
                u64::try_from(v).map(Seed).map_err(|_| E::custom("seed must be non-negative"))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Seed, E> {
                Ok(Seed(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Seed, E> {
                v.parse().map(Seed).map_err(E::custom)
            }
        }
        d.deserialize_any(SeedVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Seed,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub allow_nonconverged: bool,
    pub model: ModelRef,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqGameFile>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub flows_format: FlowFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Validate(ValidateExperiment),
    Solve(SolveExperiment),
    Chaos(ChaosOptions),
    Nash(NashExperiment),
    TruncationStudy(TruncationExperiment),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Validate(_) => "validate",
            Experiment::Solve(_) => "solve",
            Experiment::Chaos(_) => "chaos",
            Experiment::Nash(_) => "nash",
            Experiment::TruncationStudy(_) => "truncation-study",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateExperiment {
    pub samples: usize,
}

impl Default for ValidateExperiment {
    fn default() -> Self {
        Self { samples: 256 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveExperiment {
    /// `φ_n` level; untruncated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashExperiment {
    pub mode: NashMode,
    pub population: usize,
    pub sizes: Vec<usize>,
    pub deviations: Vec<Deviation>,
    pub repetitions: usize,
    pub open_loop: bool,
    pub enforce_flags: bool,
    pub best_response_paths: usize,
    /// Ladder of the cost-convergence check; skipped when empty.
    pub cost_sizes: Vec<usize>,
    pub cost_repetitions: usize,
}

impl Default for NashExperiment {
    fn default() -> Self {
        let o = NashOptions::default();
        Self {
            mode: o.mode,
            population: o.population,
            sizes: o.sizes,
            deviations: o.deviations,
            repetitions: o.repetitions,
            open_loop: o.open_loop,
            enforce_flags: o.enforce_flags,
            best_response_paths: o.best_response_paths,
            cost_sizes: Vec::new(),
            cost_repetitions: 256,
        }
    }
}

impl NashExperiment {
    pub fn options(&self, allow_nonconverged: bool) -> NashOptions {
        NashOptions {
            mode: self.mode,
            population: self.population,
            sizes: self.sizes.clone(),
            deviations: self.deviations.clone(),
            repetitions: self.repetitions,
            open_loop: self.open_loop,
            enforce_flags: self.enforce_flags,
            allow_nonconverged,
            best_response_paths: self.best_response_paths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationExperiment {
    pub levels: Vec<f64>,
}

impl Default for TruncationExperiment {
    fn default() -> Self {
        Self {
            levels: vec![0.01, 0.1, 1.0, 10.0, 100.0, 1e6],
        }
    }
}

type Rows = Vec<Vec<f64>>;

/// LQ game description, see [`LqPopulation`] for the meaning of the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqGameFile {
    pub name: String,
    pub horizon: f64,
    pub populations: Vec<LqPopulationFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqPopulationFile {
    #[serde(default = "competitive")]
    pub cooperation: Cooperation,
    pub a: Rows,
    pub b: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub own_mean_drift: Option<Rows>,
    pub sigma: Rows,
    pub r: Rows,
    pub q: Rows,
    pub qt: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub own_target: Option<Rows>,
    /// One entry per other population, in population order.
    #[serde(default)]
    pub others: Vec<LqCouplingFile>,
    #[serde(default)]
    pub measure_gain: f64,
    pub initial_law: InitialLawFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<BoxFile>,
}

fn competitive() -> Cooperation {
    Cooperation::Competitive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqCouplingFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLawFile {
    Gaussian { mean: Vec<f64>, std: f64 },
    PointMass { at: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

fn matrix(rows: &Rows, what: &str) -> Result<Matrix, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("{what}: expected a non-empty rectangular matrix")));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn zeros_or(rows: &Option<Rows>, d: usize, what: &str) -> Result<Matrix, CliError> {
    rows.as_ref().map_or(Ok(Matrix::zeros(d, d)), |r| matrix(r, what))
}

impl LqPopulationFile {
    fn build(&self, i: usize) -> Result<LqPopulation, CliError> {
        let at = |field: &str| format!("populations[{i}].{field}");
        let a = matrix(&self.a, &at("a"))?;
        let d = a.nrows();
        let initial_law = match &self.initial_law {
            InitialLawFile::Gaussian { mean, std } => InitialLaw::gaussian_iso(Vector::from_vec(mean.clone()), *std),
            InitialLawFile::PointMass { at } => InitialLaw::PointMass(Vector::from_vec(at.clone())),
            InitialLawFile::Uniform { lower, upper } => InitialLaw::Uniform {
                lower: Vector::from_vec(lower.clone()),
                upper: Vector::from_vec(upper.clone()),
            },
        };
        let actions = match &self.actions {
            Some(b) => Some(
                ActionSet::boxed(Vector::from_vec(b.lower.clone()), Vector::from_vec(b.upper.clone()))
                    .map_err(|e| CliError::Config(format!("{}: {e}", at("actions"))))?,
            ),
            None => None,
        };
        let others = self
            .others
            .iter()
            .enumerate()
            .map(|(j, c)| {
                Ok(LqCoupling {
                    drift: zeros_or(&c.drift, d, &at(&format!("others[{j}].drift")))?,
                    target: zeros_or(&c.target, d, &at(&format!("others[{j}].target")))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(LqPopulation {
            a,
            b: matrix(&self.b, &at("b"))?,
            b0: self.b0.clone().map_or(Vector::zeros(d), Vector::from_vec),
            own_mean_drift: zeros_or(&self.own_mean_drift, d, &at("own_mean_drift"))?,
            sigma: matrix(&self.sigma, &at("sigma"))?,
            r: matrix(&self.r, &at("r"))?,
            q: matrix(&self.q, &at("q"))?,
            qt: matrix(&self.qt, &at("qt"))?,
            own_target: zeros_or(&self.own_target, d, &at("own_target"))?,
            others,
            measure_gain: self.measure_gain,
            cooperation: self.cooperation,
            initial_law,
            actions,
        })
    }
}

impl LqGameFile {
    pub fn build(&self) -> Result<GameSpec, CliError> {
        let m = self.populations.len();
        let pops = self
            .populations
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.others.len() + 1 != m {
                    return Err(CliError::Config(format!(
                        "populations[{i}].others: expected {} entries, found {}",
                        m.saturating_sub(1),
                        p.others.len()
                    )));
                }
                p.build(i)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(lq_game(&self.name, pops, self.horizon)?)
    }
}

impl ModelRef {
    pub fn builtin(name: &str) -> Self {
        Self {
            builtin: Some(name.to_string()),
            ..Self::default()
        }
    }

    /// Replaces a `file` reference by the inline model it points to.
    pub fn inline(&mut self, base: &Path) -> Result<(), CliError> {
        if let Some(file) = self.file.take() {
            let path = base.join(&file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("model file {}: {e}", path.display())))?;
            let game: LqGameFile =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("model file {}: {e}", path.display())))?;
            if self.builtin.is_some() || self.lq.is_some() {
                return Err(CliError::Config("model: give exactly one of builtin, file, lq".into()));
            }
            self.lq = Some(game);
        }
        Ok(())
    }

    pub fn build(&self) -> Result<GameSpec, CliError> {
        match (&self.builtin, &self.file, &self.lq) {
            (Some(name), None, None) => {
                let params = BuiltinParams(self.params.clone());
                Ok(lookup_builtin(name, &params)?)
            }
            (None, None, Some(game)) => {
                if !self.params.is_empty() {
                    return Err(CliError::Config("model.params only applies to builtins".into()));
                }
                game.build()
            }
            (None, Some(_), None) => Err(CliError::Config("model file was not loaded".into())),
            _ => Err(CliError::Config("model: give exactly one of builtin, file, lq".into())),
        }
    }
}

impl ExperimentConfig {
    pub fn for_builtin(name: &str) -> Self {
        Self {
            seed: Seed(0),
            out: None,
            allow_nonconverged: false,
            model: ModelRef::builtin(name),
            solver: SolverConfig::default(),
            fixed_point: FixedPointConfig::default(),
            output: OutputConfig::default(),
            experiment: None,
        }
    }

    /// Parses TOML; model files are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.model.inline(base)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
