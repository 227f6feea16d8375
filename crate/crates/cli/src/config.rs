//! Fully resolved run configurations.
//!
//! A [`RunConfig`] is the single source of truth for a run: flags and
//! config-file values are merged and defaulted into it, its JSON
//! serialization is hashed into the manifest, and `rerun` deserializes it
//! back to re-execute the identical run.

use crate::args::{DmlArgs, ForestArgs, GenericArgs, SimulateArgs};
use crate::error::{CliError, CliResult};
use cml_core::learners::{LearnerMethod, LearnerSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const FORMAT_TEXT: &str = "text-table";
pub const FORMAT_CSV: &str = "csv";
pub const FORMAT_JSONL: &str = "json-lines";

/// Where the data comes from and which columns play which role.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Option<Vec<String>>,
    #[serde(default)]
    pub instruments: Vec<String>,
    pub cluster: Option<String>,
    pub block: Option<String>,
}

/// Output destination and table formats.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct DmlRun {
    pub data: DataConfig,
    pub learner_g: LearnerSpec,
    pub learner_m: LearnerSpec,
    pub learner_r: Option<LearnerSpec>,
    pub folds: usize,
    pub splits: usize,
    pub aggregation: String,
    pub level: f64,
    pub seed: u64,
    pub output: OutputConfig,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ForestRun {
    pub data: DataConfig,
    pub trees: usize,
    pub subsample: f64,
    pub honesty: f64,
    pub min_treated: usize,
    pub min_control: usize,
    pub mtry: Option<usize>,
    pub cluster_mode: bool,
    pub propensity: String,
    pub tune: usize,
    pub save_model: Option<PathBuf>,
    pub seed: u64,
    pub output: OutputConfig,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GenericRun {
    pub data: DataConfig,
    pub learners: Vec<String>,
    pub splits: usize,
    pub groups: usize,
    pub level: f64,
    pub clan: Option<Vec<String>>,
    pub propensity: String,
    pub seed: u64,
    pub output: OutputConfig,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SimulateRun {
    pub dgp: String,
    pub n: usize,
    pub p: usize,
    pub params: BTreeMap<String, f64>,
    pub reps: usize,
    pub method: String,
    pub learner: String,
    pub folds: usize,
    pub splits: usize,
    pub trees: usize,
    pub seed: u64,
    pub output: OutputConfig,
}

/// A fully resolved, re-executable run description.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Dml(DmlRun),
    DmlIv(DmlRun),
    Forest(ForestRun),
    Generic(GenericRun),
    Simulate(SimulateRun),
}

impl RunConfig {
    pub fn command_name(&self) -> &'static str {
        match self {
            RunConfig::Dml(_) => "dml",
            RunConfig::DmlIv(_) => "dml-iv",
            RunConfig::Forest(_) => "forest",
            RunConfig::Generic(_) => "generic",
            RunConfig::Simulate(_) => "simulate",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Dml(c) | RunConfig::DmlIv(c) => c.seed,
            RunConfig::Forest(c) => c.seed,
            RunConfig::Generic(c) => c.seed,
            RunConfig::Simulate(c) => c.seed,
        }
    }

    pub fn output(&self) -> &OutputConfig {
        match self {
            RunConfig::Dml(c) | RunConfig::DmlIv(c) => &c.output,
            RunConfig::Forest(c) => &c.output,
            RunConfig::Generic(c) => &c.output,
            RunConfig::Simulate(c) => &c.output,
        }
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        let output = match self {
            RunConfig::Dml(c) | RunConfig::DmlIv(c) => &mut c.output,
            RunConfig::Forest(c) => &mut c.output,
            RunConfig::Generic(c) => &mut c.output,
            RunConfig::Simulate(c) => &mut c.output,
        };
        output.dir = dir;
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks everything that can be checked before estimation starts:
    /// referenced files exist, formats and method names are known, numeric
    /// settings are in range.
    pub fn validate(&self) -> CliResult<()> {
        validate_formats(&self.output().formats)?;
        match self {
            RunConfig::Dml(c) => c.validate(false),
            RunConfig::DmlIv(c) => c.validate(true),
            RunConfig::Forest(c) => c.validate(),
            RunConfig::Generic(c) => c.validate(),
            RunConfig::Simulate(c) => c.validate(),
        }
    }
}

impl DmlRun {
    fn validate(&self, iv: bool) -> CliResult<()> {
        self.data.validate()?;
        if iv && self.data.instruments.is_empty() {
            return Err(CliError::Config(
                "dml-iv requires at least one instrument column (--instruments)".into(),
            ));
        }
        if !iv && !self.data.instruments.is_empty() {
            return Err(CliError::Config(
                "instruments are only used by dml-iv; drop --instruments or switch commands"
                    .into(),
            ));
        }
        if !iv && self.learner_r.is_some() {
            return Err(CliError::Config(
                "--learner-r is only used by dml-iv".into(),
            ));
        }
        parse_aggregation(&self.aggregation)?;
        check_level(self.level)?;
        Ok(())
    }
}

impl ForestRun {
    fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        parse_forest_propensity(&self.propensity)?;
        Ok(())
    }
}

impl GenericRun {
    fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        if self.learners.is_empty() {
            return Err(CliError::Config("at least one proxy learner is required".into()));
        }
        for l in &self.learners {
            parse_method(l)?;
        }
        parse_generic_propensity(&self.propensity, self.seed)?;
        check_level(self.level)?;
        Ok(())
    }
}

impl SimulateRun {
    fn validate(&self) -> CliResult<()> {
        if self.reps == 0 {
            return Err(CliError::Config("--reps must be at least 1".into()));
        }
        match self.method.as_str() {
            "dml" | "dml_iv" | "forest" => {}
            other => {
                return Err(CliError::Config(format!(
                    "unknown simulation method '{other}'; expected dml, dml_iv, or forest"
                )))
            }
        }
        parse_method(&self.learner)?;
        Ok(())
    }
}

impl DataConfig {
    fn validate(&self) -> CliResult<()> {
        if !self.path.is_file() {
            return Err(CliError::Config(format!(
                "data file {} does not exist",
                self.path.display()
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> cml_core::dataset::ColumnSchema {
        cml_core::dataset::ColumnSchema {
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            covariates: self.covariates.clone(),
            instruments: self.instruments.clone(),
            cluster: self.cluster.clone(),
            block: self.block.clone(),
        }
    }
}

fn check_level(level: f64) -> CliResult<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config(format!(
            "confidence level must lie strictly between 0 and 1, got {level}"
        )));
    }
    Ok(())
}

fn validate_formats(formats: &[String]) -> CliResult<()> {
    if formats.is_empty() {
        return Err(CliError::Config("at least one output format is required".into()));
    }
    for f in formats {
        if ![FORMAT_TEXT, FORMAT_CSV, FORMAT_JSONL].contains(&f.as_str()) {
            return Err(CliError::Config(format!(
                "unknown output format '{f}'; expected text-table, csv, or json-lines"
            )));
        }
    }
    Ok(())
}

pub fn parse_aggregation(s: &str) -> CliResult<cml_core::dml::Aggregation> {
    match s {
        "median" => Ok(cml_core::dml::Aggregation::Median),
        "mean" => Ok(cml_core::dml::Aggregation::Mean),
        other => Err(CliError::Config(format!(
            "unknown aggregation '{other}'; expected median or mean"
        ))),
    }
}

pub fn parse_method(s: &str) -> CliResult<LearnerMethod> {
    LearnerMethod::from_str(s).map_err(CliError::from)
}

/// A learner specification with default hyperparameters for the named
/// method.
pub fn learner_spec(method: &str, seed: u64) -> CliResult<LearnerSpec> {
    Ok(LearnerSpec {
        method: parse_method(method)?,
        hyperparameters: BTreeMap::new(),
        cv_folds: 10,
        seed,
    })
}

/// Forest propensity flag: `estimated`, `by_block`, or `constant:<p>`.
pub fn parse_forest_propensity(s: &str) -> CliResult<cml_core::causal_forest::PropensityMode> {
    use cml_core::causal_forest::PropensityMode;
    if s == "estimated" {
        return Ok(PropensityMode::Estimated);
    }
    if s == "by_block" {
        return Ok(PropensityMode::ByBlock);
    }
    if let Some(v) = s.strip_prefix("constant:") {
        let p: f64 = v.parse().map_err(|_| {
            CliError::Config(format!("constant propensity '{v}' is not a number"))
        })?;
        return Ok(PropensityMode::Constant(p));
    }
    Err(CliError::Config(format!(
        "unknown propensity '{s}'; expected estimated, by_block, or constant:<p>"
    )))
}

/// Generic-analysis propensity flag: `constant`, `by_block`, or
/// `learned:<learner>`.
pub fn parse_generic_propensity(
    s: &str,
    seed: u64,
) -> CliResult<cml_core::generic_ml::PropensitySpec> {
    use cml_core::generic_ml::PropensitySpec;
    if s == "constant" {
        return Ok(PropensitySpec::Constant);
    }
    if s == "by_block" {
        return Ok(PropensitySpec::ByBlock);
    }
    if let Some(m) = s.strip_prefix("learned:") {
        return Ok(PropensitySpec::Learned {
            learner: learner_spec(m, seed)?,
        });
    }
    Err(CliError::Config(format!(
        "unknown propensity '{s}'; expected constant, by_block, or learned:<learner>"
    )))
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| {
        CliError::Config(format!(
            "missing required value: --{flag} (or key '{}' in the config file)",
            flag.replace('-', "_")
        ))
    })
}

fn default_formats() -> Vec<String> {
    vec![
        FORMAT_TEXT.to_string(),
        FORMAT_CSV.to_string(),
        FORMAT_JSONL.to_string(),
    ]
}

fn resolve_output(out: Option<PathBuf>, formats: Option<Vec<String>>) -> CliResult<OutputConfig> {
    let dir = require(out, "out")?;
    let mut seen = Vec::new();
    for f in formats.unwrap_or_else(default_formats) {
        if !seen.contains(&f) {
            seen.push(f);
        }
    }
    Ok(OutputConfig { dir, formats: seen })
}

fn resolve_data(
    data: Option<PathBuf>,
    outcome: Option<String>,
    treatment: Option<String>,
    covariates: Option<Vec<String>>,
    instruments: Option<Vec<String>>,
    cluster: Option<String>,
    block: Option<String>,
) -> CliResult<DataConfig> {
    Ok(DataConfig {
        path: require(data, "data")?,
        outcome: require(outcome, "outcome")?,
        treatment: require(treatment, "treatment")?,
        covariates,
        instruments: instruments.unwrap_or_default(),
        cluster,
        block,
    })
}

/// Reads and parses the TOML config file for a subcommand.
pub fn load_file<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

pub fn resolve_dml(args: DmlArgs, iv: bool) -> CliResult<RunConfig> {
    let merged = match &args.config {
        Some(path) => args.clone().overlay(load_file(path)?),
        None => args,
    };
    let seed = merged.seed.unwrap_or(1);
    let learner_g_name = merged.learner.unwrap_or_else(|| "lasso".to_string());
    let learner_m_name = merged.learner_m.unwrap_or_else(|| learner_g_name.clone());
    let run = DmlRun {
        data: resolve_data(
            merged.data,
            merged.outcome,
            merged.treatment,
            merged.covariates,
            merged.instruments,
            merged.cluster,
            merged.block,
        )?,
        learner_g: learner_spec(&learner_g_name, seed)?,
        learner_m: learner_spec(&learner_m_name, seed)?,
        learner_r: merged
            .learner_r
            .map(|name| learner_spec(&name, seed))
            .transpose()?,
        folds: merged.folds.unwrap_or(2),
        splits: merged.splits.unwrap_or(100),
        aggregation: merged.aggregation.unwrap_or_else(|| "median".to_string()),
        level: merged.level.unwrap_or(0.95),
        seed,
        output: resolve_output(merged.out, merged.formats)?,
    };
    let config = if iv {
        RunConfig::DmlIv(run)
    } else {
        RunConfig::Dml(run)
    };
    config.validate()?;
    Ok(config)
}

pub fn resolve_forest(args: ForestArgs) -> CliResult<RunConfig> {
    let merged = match &args.config {
        Some(path) => args.clone().overlay(load_file(path)?),
        None => args,
    };
    let run = ForestRun {
        data: resolve_data(
            merged.data,
            merged.outcome,
            merged.treatment,
            merged.covariates,
            None,
            merged.cluster,
            merged.block,
        )?,
        trees: merged.trees.unwrap_or(2000),
        subsample: merged.subsample.unwrap_or(0.5),
        honesty: merged.honesty.unwrap_or(0.5),
        min_treated: merged.min_treated.unwrap_or(5),
        min_control: merged.min_control.unwrap_or(5),
        mtry: merged.mtry,
        cluster_mode: merged.cluster_mode.unwrap_or(false),
        propensity: merged.propensity.unwrap_or_else(|| "estimated".to_string()),
        tune: merged.tune.unwrap_or(0),
        save_model: merged.save_model,
        seed: merged.seed.unwrap_or(1),
        output: resolve_output(merged.out, merged.formats)?,
    };
    let config = RunConfig::Forest(run);
    config.validate()?;
    Ok(config)
}

pub fn resolve_generic(args: GenericArgs) -> CliResult<RunConfig> {
    let merged = match &args.config {
        Some(path) => args.clone().overlay(load_file(path)?),
        None => args,
    };
    let run = GenericRun {
        data: resolve_data(
            merged.data,
            merged.outcome,
            merged.treatment,
            merged.covariates,
            None,
            merged.cluster,
            merged.block,
        )?,
        learners: merged.learners.unwrap_or_else(|| vec!["lasso".to_string()]),
        splits: merged.splits.unwrap_or(100),
        groups: merged.groups.unwrap_or(5),
        level: merged.level.unwrap_or(0.90),
        clan: merged.clan,
        propensity: merged.propensity.unwrap_or_else(|| "constant".to_string()),
        seed: merged.seed.unwrap_or(1),
        output: resolve_output(merged.out, merged.formats)?,
    };
    let config = RunConfig::Generic(run);
    config.validate()?;
    Ok(config)
}

pub fn resolve_simulate(args: SimulateArgs) -> CliResult<RunConfig> {
    let merged = match &args.config {
        Some(path) => args.clone().overlay(load_file(path)?),
        None => args,
    };
    let dgp = require(merged.dgp, "dgp")?;
    let method = merged.method.unwrap_or_else(|| default_method(&dgp).to_string());
    let mut params = BTreeMap::new();
    for kv in merged.params.unwrap_or_default() {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--param expects key=value, got '{kv}'"))
        })?;
        let value: f64 = v.parse().map_err(|_| {
            CliError::Config(format!("--param {k}: '{v}' is not a number"))
        })?;
        params.insert(k.to_string(), value);
    }
    let run = SimulateRun {
        dgp,
        n: merged.n.unwrap_or(500),
        p: merged.p.unwrap_or(10),
        params,
        reps: merged.reps.unwrap_or(100),
        method,
        learner: merged.learner.unwrap_or_else(|| "lasso".to_string()),
        folds: merged.folds.unwrap_or(2),
        splits: merged.splits.unwrap_or(10),
        trees: merged.trees.unwrap_or(500),
        seed: merged.seed.unwrap_or(1),
        output: resolve_output(merged.out, merged.formats)?,
    };
    let config = RunConfig::Simulate(run);
    config.validate()?;
    Ok(config)
}

fn default_method(dgp: &str) -> &'static str {
    match dgp {
        "pliv_endogenous" => "dml_iv",
        "hte_forest" | "hte_null" => "forest",
        _ => "dml",
    }
}
