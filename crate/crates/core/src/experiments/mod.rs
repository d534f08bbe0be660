//! Scenario runner: a JSON config in, CSV tables plus `summary.json` and `manifest.json` out.
//!
//! Every random quantity is drawn from `seeding::stream(seed, stage, index)`, and parallel
//! loops collect in index order, so outputs do not depend on the thread count.

mod badset_scaling;
mod chaos;
mod common;
mod concatenation;
mod counterexample;
mod htheorem;
mod lanford;
mod loschmidt;
mod output;
mod tree_vs_solver;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use badset_scaling::BadsetScalingParams;
pub use chaos::ChaosParams;
pub use common::{DensityConfig, DensityForm, PhaseGridConfig, SolverConfig};
pub use concatenation::ConcatenationParams;
pub use counterexample::CounterexampleParams;
pub use htheorem::HtheoremParams;
pub use lanford::LanfordParams;
pub use loschmidt::LoschmidtParams;
pub use output::{FileRecord, OutputDir};
pub use tree_vs_solver::TreeVsSolverParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Lanford,
    Loschmidt,
    Concatenation,
    BadsetScaling,
    Chaos,
    Counterexample,
    TreeVsSolver,
    Htheorem,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Lanford,
        Scenario::Loschmidt,
        Scenario::Concatenation,
        Scenario::BadsetScaling,
        Scenario::Chaos,
        Scenario::Counterexample,
        Scenario::TreeVsSolver,
        Scenario::Htheorem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Lanford => "lanford",
            Scenario::Loschmidt => "loschmidt",
            Scenario::Concatenation => "concatenation",
            Scenario::BadsetScaling => "badset-scaling",
            Scenario::Chaos => "chaos",
            Scenario::Counterexample => "counterexample",
            Scenario::TreeVsSolver => "tree-vs-solver",
            Scenario::Htheorem => "htheorem",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Scenario::Lanford => "particle marginals versus the Boltzmann solution across N",
            Scenario::Loschmidt => "velocity reversal: the particles retrace, the kinetic description does not",
            Scenario::Concatenation => "restarting the solver from an estimated marginal",
            Scenario::BadsetScaling => "measure of the forward and backward bad sets against the radius",
            Scenario::Chaos => "chaos defect of factorized data versus N",
            Scenario::Counterexample => "collision-free conditioned ensembles follow free transport",
            Scenario::TreeVsSolver => "Duhamel partial sums from collision trees versus the solver",
            Scenario::Htheorem => "entropy and entropy production of forward and reverse solves",
        }
    }
}

fn default_dim() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Scenario parameters; omitted keys take their defaults, unknown keys are rejected.
    #[serde(default)]
    pub params: Value,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self { schema_version: SCHEMA_VERSION, scenario, seed, dim: 2, output_dir: None, params: Value::Null }
    }

    pub fn with_params(mut self, params: Value) -> Self {
        self.params = params;
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the compact JSON with sorted keys.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("run aborted: {0}")]
    Pathology(String),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Pathology(_) | ExperimentError::Io(_) => 3,
        }
    }
}

macro_rules! pathology_from {
    ($($t:ty),*) => {
        $(impl From<$t> for ExperimentError {
            fn from(e: $t) -> Self {
                ExperimentError::Pathology(e.to_string())
            }
        })*
    };
}

pathology_from!(
    crate::sim::SimError,
    crate::initial_data::SampleError,
    crate::solver::SolverError,
    crate::solver::dsmc::DsmcError,
    crate::trees::TreeError,
    crate::observables::ObservableError,
    crate::badsets::BadSetError
);

/// Parsed, checked parameters of one scenario.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum ScenarioParams {
    Lanford(LanfordParams),
    Loschmidt(LoschmidtParams),
    Concatenation(ConcatenationParams),
    BadsetScaling(BadsetScalingParams),
    Chaos(ChaosParams),
    Counterexample(CounterexampleParams),
    TreeVsSolver(TreeVsSolverParams),
    Htheorem(HtheoremParams),
}

fn parse<T: DeserializeOwned>(params: &Value) -> Result<T, ExperimentError> {
    let value = if params.is_null() { Value::Object(Map::new()) } else { params.clone() };
    serde_json::from_value(value).map_err(|e| ExperimentError::Config(format!("params: {e}")))
}

#[derive(Clone, Debug)]
pub struct Validated {
    pub config: ExperimentConfig,
    pub params: ScenarioParams,
    pub warnings: Vec<String>,
}

/// Parses the scenario parameters and checks the scenario-specific constraints.
pub fn validate(config: &ExperimentConfig) -> Result<Validated, ExperimentError> {
    if config.schema_version != SCHEMA_VERSION {
        return Err(ExperimentError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    if config.dim != 2 && config.dim != 3 {
        return Err(ExperimentError::Config(format!("dim must be 2 or 3, got {}", config.dim)));
    }
    let mut warnings = Vec::new();
    if config.dim == 3 {
        warnings.push("d = 3 is supported but slow at the default sizes".to_string());
    }
    let dim = config.dim;
    let params = match config.scenario {
        Scenario::Lanford => ScenarioParams::Lanford(parse::<LanfordParams>(&config.params)?.checked(dim, &mut warnings)?),
        Scenario::Loschmidt => {
            ScenarioParams::Loschmidt(parse::<LoschmidtParams>(&config.params)?.checked(dim, &mut warnings)?)
        }
        Scenario::Concatenation => {
            ScenarioParams::Concatenation(parse::<ConcatenationParams>(&config.params)?.checked(dim, &mut warnings)?)
        }
        Scenario::BadsetScaling => {
            ScenarioParams::BadsetScaling(parse::<BadsetScalingParams>(&config.params)?.checked(dim, &mut warnings)?)
        }
        Scenario::Chaos => ScenarioParams::Chaos(parse::<ChaosParams>(&config.params)?.checked(dim, &mut warnings)?),
        Scenario::Counterexample => {
            ScenarioParams::Counterexample(parse::<CounterexampleParams>(&config.params)?.checked(dim, &mut warnings)?)
        }
        Scenario::TreeVsSolver => {
            ScenarioParams::TreeVsSolver(parse::<TreeVsSolverParams>(&config.params)?.checked(dim, &mut warnings)?)
        }
        Scenario::Htheorem => ScenarioParams::Htheorem(parse::<HtheoremParams>(&config.params)?.checked(dim, &mut warnings)?),
    };
    Ok(Validated { config: config.clone(), params, warnings })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

/// Scenario-level checks and headline numbers, written to `summary.json`.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub assertions: Vec<Assertion>,
    pub metrics: Map<String, Value>,
}

impl Report {
    pub fn check(&mut self, name: &str, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) {
        let detail = detail.into();
        if passed {
            log::info!("pass {name}: {value} vs {threshold} {detail}");
        } else {
            log::warn!("FAIL {name}: {value} vs {threshold} {detail}");
        }
        self.assertions.push(Assertion { name: name.into(), passed, value, threshold, detail });
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(value).expect("metric serializes"));
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Scenario,
    pub dim: usize,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub metrics: Map<String, Value>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: Scenario,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub files: Vec<FileRecord>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTime>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub manifest: RunManifest,
    pub output_dir: PathBuf,
}

/// Shared state handed to the scenario implementations.
pub(crate) struct Context<'a> {
    pub seed: u64,
    pub out: &'a mut OutputDir,
    pub report: Report,
    pub stages: Vec<StageTime>,
    pub warnings: Vec<String>,
    clock: Instant,
}

impl Context<'_> {
    /// Records the time spent since the previous stage mark.
    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        let seconds = (now - self.clock).as_secs_f64();
        log::info!("stage {name} done in {seconds:.2} s");
        self.stages.push(StageTime { stage: name.into(), seconds });
        self.clock = now;
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }
}

pub fn default_output_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", config.scenario.name(), config.seed)))
}

/// Validates and runs `config`, writing into `out_dir` (or the configured default).
pub fn run(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome, ExperimentError> {
    let validated = validate(config)?;
    for w in &validated.warnings {
        log::warn!("{w}");
    }
    let root = out_dir.map(Path::to_path_buf).unwrap_or_else(|| default_output_dir(config));
    let mut out = OutputDir::create(&root)?;
    let started = Instant::now();
    let started_unix_seconds = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut ctx = Context {
        seed: config.seed,
        out: &mut out,
        report: Report::default(),
        stages: Vec::new(),
        warnings: validated.warnings.clone(),
        clock: started,
    };
    macro_rules! dispatch {
        ($module:ident, $p:expr) => {
            match config.dim {
                2 => $module::run::<2>($p, &mut ctx)?,
                _ => $module::run::<3>($p, &mut ctx)?,
            }
        };
    }
    match &validated.params {
        ScenarioParams::Lanford(p) => dispatch!(lanford, p),
        ScenarioParams::Loschmidt(p) => dispatch!(loschmidt, p),
        ScenarioParams::Concatenation(p) => dispatch!(concatenation, p),
        ScenarioParams::BadsetScaling(p) => dispatch!(badset_scaling, p),
        ScenarioParams::Chaos(p) => dispatch!(chaos, p),
        ScenarioParams::Counterexample(p) => dispatch!(counterexample, p),
        ScenarioParams::TreeVsSolver(p) => dispatch!(tree_vs_solver, p),
        ScenarioParams::Htheorem(p) => dispatch!(htheorem, p),
    }
    let Context { report, stages, warnings, .. } = ctx;
    let mut metrics = report.metrics;
    metrics.insert("params".into(), serde_json::to_value(&validated.params).expect("params serialize"));
    let summary = Summary {
        scenario: config.scenario,
        dim: config.dim,
        seed: config.seed,
        passed: report.assertions.iter().all(|a| a.passed),
        assertions: report.assertions,
        metrics,
        warnings,
    };
    out.write_json("summary.json", &summary)?;
    let manifest = RunManifest {
        scenario: config.scenario,
        config_sha256: config.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        files: out.files().to_vec(),
        started_unix_seconds,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        stages,
    };
    out.write_untracked_json("manifest.json", &manifest)?;
    Ok(RunOutcome { summary, manifest, output_dir: root })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"schema_version": 1, "scenario": "chaos", "seed": 1, "colour": "red"}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(ExperimentError::Config(_))));
        let cfg = ExperimentConfig::new(Scenario::Chaos, 1).with_params(serde_json::json!({"replicas": 10, "bogus": 1}));
        assert!(matches!(validate(&cfg), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            let v = serde_json::to_value(s).unwrap();
            assert_eq!(v, Value::String(s.name().into()));
            assert_eq!(serde_json::from_value::<Scenario>(v).unwrap(), s);
        }
    }

    #[test]
    fn defaults_validate_for_every_scenario() {
        for s in Scenario::ALL {
            let v = validate(&ExperimentConfig::new(s, 7)).unwrap();
            assert_eq!(v.config.scenario, s);
        }
        let mut cfg = ExperimentConfig::new(Scenario::Lanford, 1);
        cfg.schema_version = 9;
        assert_eq!(validate(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ExperimentConfig::from_json(r#"{"seed": 3, "scenario": "htheorem", "schema_version": 1, "params": {"dt": 0.02, "nodes": 16}}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"schema_version": 1, "params": {"nodes": 16, "dt": 0.02}, "scenario": "htheorem", "seed": 3}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 4, ..a.clone() }.hash());
    }
}
