//! Command-line arguments and the configuration-file schema.
//!
//! Every run flag is optional at parse time so values can come from three
//! layers: explicit flags override config-file values, which override
//! built-in defaults. The TOML config file for a subcommand uses the same
//! keys as the flags, in snake_case (for example `learner_m = "forest"`
//! for `--learner-m forest`); resolution and defaulting live in
//! `config.rs`.

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "cml",
    version,
    about = "Causal machine learning: debiased average effects, honest effect \
             forests, and split-robust group heterogeneity analysis",
    after_help = "Every run writes a manifest.json (seed, config hash, versions, wall time) \
                  and a full-precision results.jsonl next to the requested tables. \
                  `cml rerun --manifest <file> --out <dir>` re-executes a run; the \
                  machine-readable results are byte-identical.\n\
                  Set CML_THREADS to cap the worker-thread count."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cross-fitted debiased average effect in a partially linear model
    Dml(DmlArgs),
    /// Instrumented average effect for endogenous treatments
    DmlIv(DmlArgs),
    /// Honest causal forest: per-row effects, average effect, heterogeneity test
    Forest(ForestArgs),
    /// Proxy-based group heterogeneity analysis over many sample splits
    Generic(GenericArgs),
    /// Monte Carlo study on a synthetic generator with known truth
    Simulate(SimulateArgs),
    /// Re-execute a previous run from its manifest
    Rerun(RerunArgs),
}

/// Column roles and output destination shared by the data-driven commands.
/// (Kept inline per command so each config file is a flat table.)
macro_rules! or_field {
    ($self:ident, $file:ident, $($field:ident),+ $(,)?) => {
        $( $self.$field = $self.$field.or($file.$field); )+
    };
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DmlArgs {
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// CSV data file (header row, '.' decimal mark)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Outcome column
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment column
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns (default: all remaining columns)
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Comma-separated instrument columns (dml-iv only)
    #[arg(long, value_delimiter = ',')]
    pub instruments: Option<Vec<String>>,
    /// Cluster-identifier column for clustered standard errors
    #[arg(long)]
    pub cluster: Option<String>,
    /// Randomization-block column
    #[arg(long)]
    pub block: Option<String>,
    /// Nuisance learner: lasso, tree, forest, boosting, neural_net, ensemble, best
    #[arg(long)]
    pub learner: Option<String>,
    /// Treatment-nuisance learner (default: same as --learner)
    #[arg(long)]
    pub learner_m: Option<String>,
    /// Instrument-nuisance learner for dml-iv (default: same as --learner-m)
    #[arg(long)]
    pub learner_r: Option<String>,
    /// Cross-fitting folds (default 2)
    #[arg(long)]
    pub folds: Option<usize>,
    /// Repeated sample partitions aggregated into one estimate (default 100)
    #[arg(long)]
    pub splits: Option<usize>,
    /// Aggregation over partitions: median or mean (default median)
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Confidence level (default 0.95)
    #[arg(long)]
    pub level: Option<f64>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats: text-table, csv, json-lines (default all)
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
}

impl DmlArgs {
    /// Flags win over config-file values.
    pub fn overlay(mut self, file: DmlArgs) -> DmlArgs {
        or_field!(
            self, file, data, outcome, treatment, covariates, instruments, cluster, block,
            learner, learner_m, learner_r, folds, splits, aggregation, level, seed, out, formats,
        );
        self
    }
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ForestArgs {
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// CSV data file (header row, '.' decimal mark)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Outcome column
    #[arg(long)]
    pub outcome: Option<String>,
    /// Binary treatment column (0/1)
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns (default: all remaining columns)
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Cluster-identifier column
    #[arg(long)]
    pub cluster: Option<String>,
    /// Randomization-block column
    #[arg(long)]
    pub block: Option<String>,
    /// Number of trees (default 2000)
    #[arg(long)]
    pub trees: Option<usize>,
    /// Subsample fraction per tree, in (0,1) (default 0.5)
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Fraction of each subsample used for split search (default 0.5)
    #[arg(long)]
    pub honesty: Option<f64>,
    /// Minimum treated rows per leaf (default 5)
    #[arg(long)]
    pub min_treated: Option<usize>,
    /// Minimum control rows per leaf (default 5)
    #[arg(long)]
    pub min_control: Option<usize>,
    /// Split candidates per node (default p/3)
    #[arg(long)]
    pub mtry: Option<usize>,
    /// Subsample whole clusters instead of rows
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cluster_mode: Option<bool>,
    /// Propensity for average effects: estimated, by_block, or constant:<p>
    #[arg(long)]
    pub propensity: Option<String>,
    /// Random-search tuning draws before the final fit (default 0 = off)
    #[arg(long)]
    pub tune: Option<usize>,
    /// Write the fitted forest as JSON to this path
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats: text-table, csv, json-lines (default all)
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
}

impl ForestArgs {
    pub fn overlay(mut self, file: ForestArgs) -> ForestArgs {
        or_field!(
            self, file, data, outcome, treatment, covariates, cluster, block, trees, subsample,
            honesty, min_treated, min_control, mtry, cluster_mode, propensity, tune, save_model,
            seed, out, formats,
        );
        self
    }
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GenericArgs {
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// CSV data file (header row, '.' decimal mark)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Outcome column
    #[arg(long)]
    pub outcome: Option<String>,
    /// Binary treatment column (0/1)
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns (default: all remaining columns)
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Cluster-identifier column
    #[arg(long)]
    pub cluster: Option<String>,
    /// Randomization-block column
    #[arg(long)]
    pub block: Option<String>,
    /// Comma-separated proxy learners, each analyzed separately (default lasso)
    #[arg(long, value_delimiter = ',')]
    pub learners: Option<Vec<String>>,
    /// Number of auxiliary/main sample splits (default 100)
    #[arg(long)]
    pub splits: Option<usize>,
    /// Number of proxy quantile groups (default 5)
    #[arg(long)]
    pub groups: Option<usize>,
    /// Confidence level after the splitting adjustment (default 0.90)
    #[arg(long)]
    pub level: Option<f64>,
    /// Comma-separated covariates compared across extreme groups (default all)
    #[arg(long, value_delimiter = ',')]
    pub clan: Option<Vec<String>>,
    /// Treatment propensity: constant, by_block, or learned:<learner>
    #[arg(long)]
    pub propensity: Option<String>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats: text-table, csv, json-lines (default all)
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
}

impl GenericArgs {
    pub fn overlay(mut self, file: GenericArgs) -> GenericArgs {
        or_field!(
            self, file, data, outcome, treatment, covariates, cluster, block, learners, splits,
            groups, level, clan, propensity, seed, out, formats,
        );
        self
    }
}

#[derive(Args, Deserialize, Debug, Clone, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateArgs {
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Generator: plm_nonlinear, pliv_endogenous, hte_forest, hte_null
    #[arg(long)]
    pub dgp: Option<String>,
    /// Rows per replication (default 500)
    #[arg(long)]
    pub n: Option<usize>,
    /// Covariates per replication (default 10)
    #[arg(long)]
    pub p: Option<usize>,
    /// Generator parameter as key=value; repeatable
    #[arg(long = "param", action = ArgAction::Append)]
    pub params: Option<Vec<String>>,
    /// Number of replications (default 100)
    #[arg(long)]
    pub reps: Option<usize>,
    /// Estimator: dml, dml_iv, or forest (default chosen by generator)
    #[arg(long)]
    pub method: Option<String>,
    /// Nuisance learner for the dml methods (default lasso)
    #[arg(long)]
    pub learner: Option<String>,
    /// Cross-fitting folds for the dml methods (default 2)
    #[arg(long)]
    pub folds: Option<usize>,
    /// Repeated partitions per replication for the dml methods (default 10)
    #[arg(long)]
    pub splits: Option<usize>,
    /// Trees per forest fit (default 500)
    #[arg(long)]
    pub trees: Option<usize>,
    /// Random seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats: text-table, csv, json-lines (default all)
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
}

impl SimulateArgs {
    pub fn overlay(mut self, file: SimulateArgs) -> SimulateArgs {
        or_field!(
            self, file, dgp, n, p, params, reps, method, learner, folds, splits, trees, seed,
            out, formats,
        );
        self
    }
}

#[derive(Args, Debug, Clone)]
pub struct RerunArgs {
    /// Manifest written by a previous run
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the re-executed run
    #[arg(long)]
    pub out: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values_field_by_field() {
        let flags = DmlArgs {
            learner: Some("forest".into()),
            folds: Some(5),
            ..DmlArgs::default()
        };
        let file = DmlArgs {
            learner: Some("lasso".into()),
            splits: Some(25),
            seed: Some(9),
            ..DmlArgs::default()
        };
        let merged = flags.overlay(file);
        assert_eq!(merged.learner.as_deref(), Some("forest"));
        assert_eq!(merged.folds, Some(5));
        assert_eq!(merged.splits, Some(25));
        assert_eq!(merged.seed, Some(9));
    }

    #[test]
    fn config_files_reject_unknown_keys() {
        let err = toml::from_str::<DmlArgs>("learnr = \"lasso\"").unwrap_err();
        assert!(err.to_string().contains("learnr"));
        let ok: DmlArgs = toml::from_str("learner = \"lasso\"\nfolds = 3").unwrap();
        assert_eq!(ok.folds, Some(3));
    }

    #[test]
    fn command_line_parsing_covers_lists_and_repeats() {
        let cli = Cli::try_parse_from([
            "cml",
            "generic",
            "--data",
            "d.csv",
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--learners",
            "lasso,forest",
            "--clan",
            "x1,x2",
            "--out",
            "o",
        ])
        .unwrap();
        match cli.command {
            Command::Generic(a) => {
                assert_eq!(a.learners.unwrap(), vec!["lasso", "forest"]);
                assert_eq!(a.clan.unwrap(), vec!["x1", "x2"]);
            }
            _ => panic!("wrong command"),
        }
        let cli = Cli::try_parse_from([
            "cml", "simulate", "--dgp", "hte_null", "--param", "tau=0.3", "--param",
            "propensity=0.4", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!(a.params.unwrap(), vec!["tau=0.3", "propensity=0.4"]);
            }
            _ => panic!("wrong command"),
        }
    }
}
