//! Run execution: estimation, artifact emission, and the run manifest.
//!
//! Every run writes, inside its output directory:
//!
//! - `results.jsonl` — one JSON object per result record, full precision
//!   (always written);
//! - `report.txt` — the aligned text tables (when `text-table` is among
//!   the requested formats);
//! - `table_NN_<name>.csv` — one CSV per table (when `csv` is requested);
//! - command-specific plot data (`gates_plot_<learner>.csv`,
//!   `effects.csv`);
//! - `manifest.json` — command, seed, config hash, package versions, wall
//!   time, and the full resolved configuration, written last.
//!
//! Re-executing the configuration embedded in a manifest reproduces
//! `results.jsonl` byte for byte.

use crate::config::{
    parse_aggregation, parse_forest_propensity, parse_generic_propensity, learner_spec,
    DmlRun, ForestRun, GenericRun, RunConfig, SimulateRun, FORMAT_CSV, FORMAT_TEXT,
};
use crate::error::{CliError, CliResult};
use cml_core::causal_forest::{
    fit_causal_forest, forest_ate, heterogeneity_test, predict_cate, save_forest, tune_forest,
    ForestParams, PropensityMode,
};
use cml_core::dataset::{generate_dgp, load_csv, Dataset, LoadedCsv};
use cml_core::dml::{dml_pliv, dml_plm, DmlConfig, EstimateSummary};
use cml_core::generic_ml::{run_generic_ml, GenericMlOptions, ProxySource};
use cml_core::report::{
    emit_gates_plot_data, generic_ml_tables, heterogeneity_test_table, importance_table,
    summaries_table, variable_importance_of, ReportTable,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Reproducibility record written at the end of every run.
#[derive(Serialize, Deserialize, Debug)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
    pub config: RunConfig,
}

/// Executes a resolved run end to end and writes all artifacts.
pub fn execute(config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let start = Instant::now();
    let out_dir = config.output().dir.clone();
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    let (tables, records) = match config {
        RunConfig::Dml(run) => run_dml(run, false)?,
        RunConfig::DmlIv(run) => run_dml(run, true)?,
        RunConfig::Forest(run) => run_forest(run, &out_dir)?,
        RunConfig::Generic(run) => run_generic(run, &out_dir)?,
        RunConfig::Simulate(run) => run_simulate(run)?,
    };

    write_results(&out_dir, &records)?;
    let formats = &config.output().formats;
    if formats.iter().any(|f| f == FORMAT_TEXT) {
        let text = render_report(&tables);
        write_file(&out_dir.join("report.txt"), &text)?;
    }
    if formats.iter().any(|f| f == FORMAT_CSV) {
        for (i, table) in tables.iter().enumerate() {
            let name = format!("table_{:02}_{}.csv", i + 1, slug(&table.title));
            write_file(&out_dir.join(name), &table.render_csv()?)?;
        }
    }
    // Tables always go to standard output for interactive use.
    print!("{}", render_report(&tables));

    let manifest = Manifest {
        command: config.command_name().to_string(),
        seed: config.seed(),
        config_sha256: config.sha256(),
        versions: BTreeMap::from([
            ("cml-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("cml-core".to_string(), cml_core::version().to_string()),
        ]),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("serializing manifest: {e}")))?;
    write_file(&out_dir.join("manifest.json"), &format!("{manifest_json}\n"))?;
    Ok(())
}

/// Re-executes the run described by a manifest into a fresh directory.
pub fn rerun(manifest_path: &Path, out_dir: PathBuf) -> CliResult<()> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        CliError::Config(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("manifest {}: {e}", manifest_path.display()))
    })?;
    let mut config = manifest.config;
    config.set_output_dir(out_dir);
    execute(&config)
}

fn load(run_data: &crate::config::DataConfig) -> CliResult<LoadedCsv> {
    Ok(load_csv(&run_data.path, &run_data.schema())?)
}

fn run_dml(run: &DmlRun, iv: bool) -> CliResult<(Vec<ReportTable>, Vec<serde_json::Value>)> {
    let loaded = load(&run.data)?;
    let config = DmlConfig {
        learner_g: run.learner_g.clone(),
        learner_m: run.learner_m.clone(),
        learner_r: run.learner_r.clone(),
        k_folds: run.folds,
        s_repetitions: run.splits,
        aggregation: parse_aggregation(&run.aggregation)?,
        nominal_level: run.level,
        seed: run.seed,
    };
    let summary = if iv {
        dml_pliv(&loaded.dataset, &config)?
    } else {
        dml_plm(&loaded.dataset, &config)?
    };
    let mut table = summaries_table(
        &format!(
            "average effect of {} on {}",
            run.data.treatment, run.data.outcome
        ),
        &[&summary],
    )?;
    table.push_footnote(format!(
        "{} cross-fitting folds, {} repeated partitions, {} aggregation; \
         outcome learner {}, treatment learner {}",
        run.folds, run.splits, run.aggregation, run.learner_g.method, run.learner_m.method
    ));
    note_dropped_rows(&mut table, loaded.dropped_rows);
    let record = json!({
        "record": "estimate",
        "method": if iv { "dml_pliv" } else { "dml_plm" },
        "dropped_rows": loaded.dropped_rows,
        "summary": summary,
    });
    Ok((vec![table], vec![record]))
}

fn run_forest(
    run: &ForestRun,
    out_dir: &Path,
) -> CliResult<(Vec<ReportTable>, Vec<serde_json::Value>)> {
    let loaded = load(&run.data)?;
    let data = &loaded.dataset;
    let mut params = ForestParams {
        n_trees: run.trees,
        subsample_fraction: run.subsample,
        honesty_fraction: run.honesty,
        min_treated_per_leaf: run.min_treated,
        min_control_per_leaf: run.min_control,
        mtry: run.mtry,
        cluster_mode: run.cluster_mode,
        seed: run.seed,
    };
    let mut records = Vec::new();
    if run.tune > 0 {
        let tuned = tune_forest(data, &params, run.tune)?;
        records.push(json!({"record": "tuning", "result": tuned}));
        params = tuned.best.clone();
    }
    let model = fit_causal_forest(data, &params)?;
    if let Some(path) = &run.save_model {
        save_forest(&model, path)?;
    }
    let mode = parse_forest_propensity(&run.propensity)?;
    let ate = forest_ate(&model, data, &mode)?;
    let het = heterogeneity_test(&model, data, &mode)?;
    let importance = variable_importance_of(&model);
    let prediction = predict_cate(&model, &data.x, true)?;
    let flagged = prediction.flags.iter().filter(|f| f.is_some()).count();

    let mut effects = String::from("row,effect,variance,flag\n");
    for i in 0..data.n() {
        effects.push_str(&format!(
            "{i},{},{},{}\n",
            prediction.tau[i],
            prediction.variance[i],
            prediction.flags[i].as_deref().unwrap_or("")
        ));
    }
    write_file(&out_dir.join("effects.csv"), &effects)?;

    let mut ate_table = summaries_table("doubly robust average effect", &[&ate])?;
    ate_table.push_footnote(format!(
        "{} trees, subsample fraction {}, propensity {}",
        params.n_trees, params.subsample_fraction, run.propensity
    ));
    ate_table.push_footnote(format!(
        "per-row effects in effects.csv; variance clamped on {:.2}% of rows, \
         {flagged} rows lacked out-of-bag trees",
        100.0 * prediction.clamp_rate
    ));
    note_dropped_rows(&mut ate_table, loaded.dropped_rows);
    let tables = vec![
        ate_table,
        heterogeneity_test_table(&het)?,
        importance_table(&importance)?,
    ];
    records.push(json!({"record": "forest_ate", "summary": ate}));
    records.push(json!({"record": "heterogeneity_test", "result": het}));
    records.push(json!({"record": "variable_importance", "importance": importance}));
    records.push(json!({
        "record": "prediction_diagnostics",
        "n": data.n(),
        "clamp_rate": prediction.clamp_rate,
        "rows_without_oob_trees": flagged,
        "dropped_rows": loaded.dropped_rows,
    }));
    Ok((tables, records))
}

fn run_generic(
    run: &GenericRun,
    out_dir: &Path,
) -> CliResult<(Vec<ReportTable>, Vec<serde_json::Value>)> {
    let loaded = load(&run.data)?;
    let sources: Vec<ProxySource> = run
        .learners
        .iter()
        .map(|name| learner_spec(name, run.seed).map(ProxySource::Learner))
        .collect::<CliResult<_>>()?;
    let prop = parse_generic_propensity(&run.propensity, run.seed)?;
    let opts = GenericMlOptions {
        n_splits: run.splits,
        level: run.level,
        k_groups: run.groups,
        clan_characteristics: run.clan.clone(),
        seed: run.seed,
    };
    let results = run_generic_ml(&loaded.dataset, &sources, &prop, &opts)?;
    let mut tables = Vec::new();
    let mut records = Vec::new();
    for result in &results {
        let mut result_tables = generic_ml_tables(result)?;
        if loaded.dropped_rows > 0 {
            note_dropped_rows(&mut result_tables[0], loaded.dropped_rows);
        }
        tables.extend(result_tables);
        let plot = out_dir.join(format!("gates_plot_{}.csv", slug(&result.learner_label)));
        emit_gates_plot_data(result, &plot)?;
        records.push(json!({"record": "generic_ml", "result": result}));
    }
    Ok((tables, records))
}

fn run_simulate(run: &SimulateRun) -> CliResult<(Vec<ReportTable>, Vec<serde_json::Value>)> {
    let mut records = Vec::new();
    let mut estimates = Vec::with_capacity(run.reps);
    let mut ses = Vec::with_capacity(run.reps);
    let mut truths = Vec::with_capacity(run.reps);
    let mut covered = 0usize;
    let mut sq_err = 0.0;
    for rep in 0..run.reps {
        let dgp_seed = run.seed.wrapping_add(rep as u64);
        let sample = generate_dgp(&run.dgp, run.n, run.p, &run.params, dgp_seed)?;
        // Decorrelate estimator randomness from the draw's seed stream.
        let method_seed = dgp_seed ^ 0x8C5F_1ED0_37AB_42E9;
        let summary = simulate_once(run, &sample.dataset, method_seed)?;
        let truth = sample.true_ate;
        if summary.ci_low <= truth && truth <= summary.ci_high {
            covered += 1;
        }
        sq_err += (summary.theta - truth).powi(2);
        estimates.push(summary.theta);
        ses.push(summary.se);
        truths.push(truth);
        records.push(json!({
            "record": "simulation_rep",
            "rep": rep,
            "true_ate": truth,
            "summary": summary,
        }));
    }
    let reps = run.reps as f64;
    let mean_est = estimates.iter().sum::<f64>() / reps;
    let true_mean = truths.iter().sum::<f64>() / reps;
    let bias = mean_est - true_mean;
    let sd = if run.reps > 1 {
        (estimates.iter().map(|e| (e - mean_est).powi(2)).sum::<f64>() / (reps - 1.0)).sqrt()
    } else {
        0.0
    };
    let mean_se = ses.iter().sum::<f64>() / reps;
    let rmse = (sq_err / reps).sqrt();
    let coverage = covered as f64 / reps;

    let mut table = ReportTable::new(
        format!("simulation: {} on {} ({} replications)", run.method, run.dgp, run.reps),
        [
            "mean_estimate",
            "true_value",
            "bias",
            "sd",
            "mean_se",
            "rmse",
            "coverage",
        ]
        .map(String::from)
        .to_vec(),
    );
    table.push_row(
        run.method.clone(),
        vec![
            cml_core::report::Cell::Scalar(mean_est),
            cml_core::report::Cell::Scalar(true_mean),
            cml_core::report::Cell::Scalar(bias),
            cml_core::report::Cell::Scalar(sd),
            cml_core::report::Cell::Scalar(mean_se),
            cml_core::report::Cell::Scalar(rmse),
            cml_core::report::Cell::Scalar(coverage),
        ],
    )?;
    table.push_footnote(format!(
        "n = {}, p = {} per replication; coverage of nominal 95% intervals",
        run.n, run.p
    ));
    records.push(json!({
        "record": "simulation_summary",
        "dgp": run.dgp,
        "method": run.method,
        "reps": run.reps,
        "mean_estimate": mean_est,
        "true_value": true_mean,
        "bias": bias,
        "sd": sd,
        "mean_se": mean_se,
        "rmse": rmse,
        "coverage": coverage,
    }));
    Ok((vec![table], records))
}

fn simulate_once(run: &SimulateRun, data: &Dataset, seed: u64) -> CliResult<EstimateSummary> {
    match run.method.as_str() {
        "dml" | "dml_iv" => {
            let learner = learner_spec(&run.learner, seed)?;
            let config = DmlConfig {
                learner_g: learner.clone(),
                learner_m: learner,
                learner_r: None,
                k_folds: run.folds,
                s_repetitions: run.splits,
                aggregation: cml_core::dml::Aggregation::Median,
                nominal_level: 0.95,
                seed,
            };
            Ok(if run.method == "dml_iv" {
                dml_pliv(data, &config)?
            } else {
                dml_plm(data, &config)?
            })
        }
        "forest" => {
            let params = ForestParams {
                n_trees: run.trees,
                ..ForestParams::new(seed)
            };
            let model = fit_causal_forest(data, &params)?;
            // The synthetic binary-treatment generators assign treatment
            // with a known constant probability; use it directly.
            let mode = if run.dgp.starts_with("hte") {
                PropensityMode::Constant(run.params.get("propensity").copied().unwrap_or(0.5))
            } else {
                PropensityMode::Estimated
            };
            Ok(forest_ate(&model, data, &mode)?)
        }
        other => Err(CliError::Config(format!("unknown simulation method '{other}'"))),
    }
}

fn note_dropped_rows(table: &mut ReportTable, dropped: usize) {
    if dropped > 0 {
        table.push_footnote(format!(
            "{dropped} rows dropped at ingestion for missing values"
        ));
    }
}

fn render_report(tables: &[ReportTable]) -> String {
    let mut out = String::new();
    for table in tables {
        out.push_str(&table.render_text());
        out.push('\n');
    }
    out
}

fn write_results(out_dir: &Path, records: &[serde_json::Value]) -> CliResult<()> {
    let mut text = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Io(format!("serializing results: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    write_file(&out_dir.join("results.jsonl"), &text)
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    let mut file = fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(content.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Lowercase filename fragment from a table title or learner label.
fn slug(s: &str) -> String {
    let mut out = String::new();
    let mut last_sep = true;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            last_sep = false;
        } else if !last_sep {
            out.push('_');
            last_sep = true;
        }
        if out.len() >= 40 {
            break;
        }
    }
    let trimmed = out.trim_end_matches('_').to_string();
    if trimmed.is_empty() {
        "untitled".to_string()
    } else {
        trimmed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_filesystem_friendly() {
        assert_eq!(slug("average effect of d on y"), "average_effect_of_d_on_y");
        assert_eq!(slug("proxy regression - lasso (x)"), "proxy_regression_lasso_x");
        assert_eq!(slug("***"), "untitled");
        assert!(slug(&"long word ".repeat(20)).len() <= 40);
    }
}
