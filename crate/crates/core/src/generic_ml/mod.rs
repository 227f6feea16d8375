//! Heterogeneous-effect analysis built on proxy predictors: fit baseline
//! and effect proxies on an auxiliary half, then on the main half run the
//! best-linear-predictor regression, grouped average effects over proxy
//! quantiles, and group characteristic comparisons. Point estimates, interval
//! bounds, and p-values are aggregated as medians over many random
//! auxiliary/main splits so the reported uncertainty accounts for the
//! splitting itself.

mod regressions;

pub use regressions::{
    best_metrics, blp, clan, gates, BestMetrics, BlpFit, ClanCharacteristic, ClanFit, GatesFit,
    GatesGroup,
};

use crate::dataset::Dataset;
use crate::dml::EstimateSummary;
use crate::error::{Error, Result};
use crate::learners::{fit_learner_named, LearnerSpec, Predictor};
use crate::stats::{derive_seed, mean, median};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Seed-stream tags, chosen to be distinct across the whole crate.
const TAG_SPLIT: u64 = 0x9E11;
const TAG_SPLIT_LEARNER: u64 = 0x9E12;
const TAG_PROXY_BASELINE: u64 = 0x6E40;
const TAG_PROXY_TREATED: u64 = 0x6E41;

/// Bounds applied to learned propensity values.
const LEARNED_PROPENSITY_BOUNDS: (f64, f64) = (0.02, 0.98);

/// Baseline and effect proxy predictions on a main sample.
///
/// `b_hat` predicts the untreated outcome, `s_hat` is the difference between
/// the treated-arm and control-arm model predictions, and `s_bar` caches the
/// main-sample mean of `s_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyPair {
    pub b_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub s_bar: f64,
    pub learner_label: String,
}

impl ProxyPair {
    /// Builds a pair from prediction vectors, computing `s_bar` and checking
    /// finiteness and matching lengths.
    pub fn new(b_hat: Vec<f64>, s_hat: Vec<f64>, learner_label: String) -> Result<ProxyPair> {
        if b_hat.len() != s_hat.len() {
            return Err(Error::Data(format!(
                "proxy vectors have mismatched lengths ({} baseline, {} effect)",
                b_hat.len(),
                s_hat.len()
            )));
        }
        if s_hat.is_empty() {
            return Err(Error::Data("proxy vectors are empty".into()));
        }
        if b_hat.iter().chain(s_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Estimation(
                "proxy predictions contain non-finite values".into(),
            ));
        }
        let s_bar = mean(&s_hat);
        Ok(ProxyPair {
            b_hat,
            s_hat,
            s_bar,
            learner_label,
        })
    }

    /// Checks the pair against the sample it is meant to describe.
    pub(crate) fn check_against(&self, main: &Dataset) -> Result<()> {
        if self.b_hat.len() != main.n() || self.s_hat.len() != main.n() {
            return Err(Error::Data(format!(
                "proxy vectors cover {} rows but the main sample has {}",
                self.s_hat.len(),
                main.n()
            )));
        }
        if (self.s_bar - mean(&self.s_hat)).abs() > 1e-9 {
            return Err(Error::Data(
                "stored proxy mean does not match the effect proxy values".into(),
            ));
        }
        Ok(())
    }
}

/// How per-row treatment probabilities are obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PropensitySpec {
    /// A single value: the overall treated share.
    Constant,
    /// Treated share within each randomization block.
    ByBlock,
    /// A learner fit of treatment on covariates, clamped to [0.02, 0.98].
    Learned { learner: LearnerSpec },
}

impl fmt::Display for PropensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensitySpec::Constant => f.write_str("constant"),
            PropensitySpec::ByBlock => f.write_str("by_block"),
            PropensitySpec::Learned { learner } => write!(f, "learned({})", learner.method),
        }
    }
}

/// Materialized per-row treatment probabilities, all strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Human-readable description of how the values were produced.
    pub mode: String,
    /// One probability per row of the dataset the model was built on.
    pub values: Vec<f64>,
}

impl PropensityModel {
    /// The model restricted to the rows at `idx`, in that order.
    pub fn restrict(&self, idx: &[usize]) -> PropensityModel {
        PropensityModel {
            mode: self.mode.clone(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }

    pub(crate) fn check_against(&self, n: usize) -> Result<()> {
        if self.values.len() != n {
            return Err(Error::Data(format!(
                "propensity model covers {} rows but the sample has {n}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Data(
                "propensity values must lie strictly in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Computes per-row treatment probabilities for `data` under `spec`.
pub fn build_propensity(data: &Dataset, spec: &PropensitySpec) -> Result<PropensityModel> {
    if !data.is_binary_treatment() {
        return Err(Error::Data(
            "propensity estimation requires a binary treatment coded 0/1".into(),
        ));
    }
    let n = data.n();
    let model = match spec {
        PropensitySpec::Constant => {
            let share = mean(data.d.as_slice().unwrap());
            if !(share > 0.0 && share < 1.0) {
                return Err(Error::Data(
                    "every row shares one treatment arm; the constant propensity is degenerate"
                        .into(),
                ));
            }
            PropensityModel {
                mode: "constant".into(),
                values: vec![share; n],
            }
        }
        PropensitySpec::ByBlock => {
            let blocks = data.block_id.as_ref().ok_or_else(|| {
                Error::Config("by-block propensity requires block ids in the dataset".into())
            })?;
            let mut counts: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
            for (&block, &di) in blocks.iter().zip(data.d.iter()) {
                let entry = counts.entry(block).or_insert((0.0, 0.0));
                entry.0 += di;
                entry.1 += 1.0;
            }
            let mut shares: BTreeMap<i64, f64> = BTreeMap::new();
            for (&block, &(treated, total)) in &counts {
                let share = treated / total;
                if !(share > 0.0 && share < 1.0) {
                    return Err(Error::Data(format!(
                        "block {block} contains a single treatment arm; its propensity is degenerate"
                    )));
                }
                shares.insert(block, share);
            }
            PropensityModel {
                mode: "by_block".into(),
                values: blocks.iter().map(|b| shares[b]).collect(),
            }
        }
        PropensitySpec::Learned { learner } => {
            let model = fit_learner_named(
                learner,
                &data.x,
                data.d.as_slice().unwrap(),
                None,
                &data.covariate_names,
            )?;
            let (lo, hi) = LEARNED_PROPENSITY_BOUNDS;
            let values = model
                .predict(&data.x)
                .into_iter()
                .map(|p| p.clamp(lo, hi))
                .collect();
            PropensityModel {
                mode: format!("learned({})", learner.method),
                values,
            }
        }
    };
    model.check_against(n)?;
    Ok(model)
}

/// Fits arm-specific outcome models on the auxiliary sample and predicts on
/// the main sample: the control-arm model gives the baseline proxy, and the
/// treated-minus-control prediction difference gives the effect proxy.
pub fn fit_proxies(aux: &Dataset, main: &Dataset, spec: &LearnerSpec) -> Result<ProxyPair> {
    if aux.covariate_names != main.covariate_names {
        return Err(Error::Data(
            "auxiliary and main samples have different covariate schemas".into(),
        ));
    }
    if !aux.is_binary_treatment() {
        return Err(Error::Data(
            "proxy fitting requires a binary treatment coded 0/1".into(),
        ));
    }
    let controls: Vec<usize> = (0..aux.n()).filter(|&i| aux.d[i] == 0.0).collect();
    let treated: Vec<usize> = (0..aux.n()).filter(|&i| aux.d[i] == 1.0).collect();
    if controls.is_empty() || treated.is_empty() {
        return Err(Error::Data(
            "auxiliary sample lacks a treatment arm; cannot fit proxy models".into(),
        ));
    }
    let fit_arm = |rows: &[usize], tag: u64| -> Result<Predictor> {
        let sub = aux.subset(rows);
        let mut arm_spec = spec.clone();
        arm_spec.seed = derive_seed(spec.seed, &[tag]);
        fit_learner_named(
            &arm_spec,
            &sub.x,
            sub.y.as_slice().unwrap(),
            None,
            &sub.covariate_names,
        )
    };
    let control_model = fit_arm(&controls, TAG_PROXY_BASELINE)?;
    let treated_model = fit_arm(&treated, TAG_PROXY_TREATED)?;
    let b_hat = control_model.predict(&main.x);
    let s_hat: Vec<f64> = treated_model
        .predict(&main.x)
        .into_iter()
        .zip(&b_hat)
        .map(|(t, &c)| t - c)
        .collect();
    ProxyPair::new(b_hat, s_hat, spec.method.to_string())
}

/// Where per-split proxies come from: a learner refit on each auxiliary
/// half, or externally supplied full-sample vectors (for calibration studies
/// against a known truth) restricted to each main half.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ProxySource {
    Learner(LearnerSpec),
    Oracle {
        baseline: Vec<f64>,
        effect: Vec<f64>,
        label: String,
    },
}

impl ProxySource {
    pub fn label(&self) -> String {
        match self {
            ProxySource::Learner(spec) => spec.method.to_string(),
            ProxySource::Oracle { label, .. } => label.clone(),
        }
    }
}

/// Settings for [`run_generic_ml`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericMlOptions {
    /// Number of random auxiliary/main splits.
    pub n_splits: usize,
    /// Final confidence level after the splitting adjustment.
    pub level: f64,
    /// Number of proxy quantile groups.
    pub k_groups: usize,
    /// Covariates compared across the extreme groups; `None` means all.
    pub clan_characteristics: Option<Vec<String>>,
    pub seed: u64,
}

impl GenericMlOptions {
    pub fn new(seed: u64) -> GenericMlOptions {
        GenericMlOptions {
            n_splits: 100,
            level: 0.90,
            k_groups: 5,
            clan_characteristics: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::Config("n_splits must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.k_groups < 2 {
            return Err(Error::Config(format!(
                "k_groups must be at least 2, got {}",
                self.k_groups
            )));
        }
        Ok(())
    }
}

/// One proxy quantile group's aggregated average effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesGroupSummary {
    pub summary: EstimateSummary,
    /// Splits in which this group lacked one treatment arm.
    pub flagged_splits: usize,
}

/// Aggregated group-mean comparison for one characteristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClanSummary {
    pub name: String,
    pub mean_most: EstimateSummary,
    pub mean_least: EstimateSummary,
    /// Two-sample difference p-value, median over splits with the
    /// splitting adjustment.
    pub p_diff: f64,
    pub notes: Vec<String>,
}

/// Median-over-splits heterogeneity analysis for one proxy source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericResult {
    pub learner_label: String,
    /// Average effect coefficient from the proxy regression.
    pub blp_beta1: EstimateSummary,
    /// Heterogeneity loading on the centered effect proxy; absent when the
    /// proxy had zero variance in every usable split.
    pub blp_beta2: Option<EstimateSummary>,
    /// Per-group average effects, lowest proxy group first.
    pub gates_groups: Vec<GatesGroupSummary>,
    /// Top-group minus bottom-group contrast.
    pub gates_difference: Option<EstimateSummary>,
    /// Whether the aggregated group effects are non-decreasing.
    pub gates_monotone: bool,
    pub clan: Vec<ClanSummary>,
    /// Heterogeneity signal captured by the proxy regression;
    /// larger ranks the proxy higher.
    pub lambda_blp: f64,
    /// Heterogeneity signal captured by the group effects.
    pub lambda_gates: f64,
    pub n_splits_used: usize,
    pub n_splits_failed: usize,
    pub k_groups: usize,
    pub nominal_level: f64,
    pub warnings: Vec<String>,
}

/// Everything computed on one auxiliary/main split for one proxy source.
struct SplitFit {
    blp: BlpFit,
    gates: GatesFit,
    clan: ClanFit,
    metrics: BestMetrics,
}

/// Runs the full proxy-based heterogeneity analysis for each source over
/// `opts.n_splits` random stratified splits and aggregates medians.
///
/// Per-split failures are tolerated up to 10% of splits for each source and
/// reported in the result; beyond that the run aborts with the last error.
pub fn run_generic_ml(
    data: &Dataset,
    sources: &[ProxySource],
    prop_spec: &PropensitySpec,
    opts: &GenericMlOptions,
) -> Result<Vec<GenericResult>> {
    opts.validate()?;
    if data.n() < 100 {
        return Err(Error::Data(format!(
            "the split-based analysis requires at least 100 rows, got {}",
            data.n()
        )));
    }
    if !data.is_binary_treatment() {
        return Err(Error::Data(
            "the split-based analysis requires a binary treatment coded 0/1".into(),
        ));
    }
    if sources.is_empty() {
        return Err(Error::Config("no proxy sources given".into()));
    }
    for source in sources {
        if let ProxySource::Oracle {
            baseline, effect, ..
        } = source
        {
            if baseline.len() != data.n() || effect.len() != data.n() {
                return Err(Error::Data(format!(
                    "oracle proxy vectors must have one entry per row ({} rows, got {} and {})",
                    data.n(),
                    baseline.len(),
                    effect.len()
                )));
            }
            if baseline.iter().chain(effect.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Data(
                    "oracle proxy vectors contain non-finite values".into(),
                ));
            }
        }
    }
    let clan_chars: Vec<String> = match &opts.clan_characteristics {
        Some(names) => {
            for name in names {
                if !data.covariate_names.contains(name) {
                    return Err(Error::Config(format!("unknown characteristic '{name}'")));
                }
            }
            names.clone()
        }
        None => data.covariate_names.clone(),
    };
    let prop = build_propensity(data, prop_spec)?;

    // With a single split there is no aggregation across splits, so the
    // per-split interval level is the requested one and p-values pass
    // through. With several splits, per-split intervals are computed at the
    // tighter (1 + level)/2 so that medians of their bounds support the
    // requested level, and the median p-value is doubled (capped at 1).
    let split_level = if opts.n_splits == 1 {
        opts.level
    } else {
        (1.0 + opts.level) / 2.0
    };

    let per_split: Vec<Vec<Result<SplitFit>>> = (0..opts.n_splits)
        .into_par_iter()
        .map(|s| {
            let split_seed = derive_seed(opts.seed, &[TAG_SPLIT, s as u64]);
            let (aux_idx, main_idx) = stratified_halves(data, split_seed);
            let aux = data.subset(&aux_idx);
            let main = data.subset(&main_idx);
            let prop_main = prop.restrict(&main_idx);
            sources
                .iter()
                .enumerate()
                .map(|(j, source)| {
                    split_pipeline(
                        &aux,
                        &main,
                        &main_idx,
                        source,
                        derive_seed(split_seed, &[TAG_SPLIT_LEARNER, j as u64]),
                        &prop_main,
                        split_level,
                        opts.k_groups,
                        &clan_chars,
                    )
                })
                .collect()
        })
        .collect();

    let mut results = Vec::with_capacity(sources.len());
    for (j, source) in sources.iter().enumerate() {
        let mut fits = Vec::new();
        let mut failed = 0usize;
        let mut last_error = String::new();
        for split_results in &per_split {
            match &split_results[j] {
                Ok(_) => {}
                Err(e) => {
                    failed += 1;
                    last_error = e.to_string();
                }
            }
        }
        if failed * 10 > opts.n_splits {
            return Err(Error::Estimation(format!(
                "proxy source '{}': {failed} of {} splits failed (more than 10%); last error: {last_error}",
                source.label(),
                opts.n_splits
            )));
        }
        for split_results in &per_split {
            if let Ok(fit) = &split_results[j] {
                fits.push(fit);
            }
        }
        results.push(aggregate_source(
            source.label(),
            &fits,
            failed,
            opts,
            &clan_chars,
        ));
    }
    Ok(results)
}

/// Runs proxies, regressions, and metrics for one source on one split.
#[allow(clippy::too_many_arguments)]
fn split_pipeline(
    aux: &Dataset,
    main: &Dataset,
    main_idx: &[usize],
    source: &ProxySource,
    learner_seed: u64,
    prop_main: &PropensityModel,
    level: f64,
    k_groups: usize,
    clan_chars: &[String],
) -> Result<SplitFit> {
    let proxies = match source {
        ProxySource::Learner(spec) => {
            let mut split_spec = spec.clone();
            split_spec.seed = learner_seed;
            fit_proxies(aux, main, &split_spec)?
        }
        ProxySource::Oracle {
            baseline,
            effect,
            label,
        } => ProxyPair::new(
            main_idx.iter().map(|&i| baseline[i]).collect(),
            main_idx.iter().map(|&i| effect[i]).collect(),
            label.clone(),
        )?,
    };
    let groups = regressions::proxy_groups(&proxies.s_hat, k_groups)?;
    let blp_fit = blp(main, &proxies, prop_main, level)?;
    let gates_fit = regressions::gates_with_groups(main, &proxies, prop_main, groups.clone(), level)?;
    let clan_fit = regressions::clan_with_groups(main, &groups, k_groups, clan_chars, level)?;
    let metrics = best_metrics(&blp_fit, &gates_fit, &proxies);
    Ok(SplitFit {
        blp: blp_fit,
        gates: gates_fit,
        clan: clan_fit,
        metrics,
    })
}

/// Splits rows into auxiliary and main halves, shuffling within each
/// (treatment arm, block) stratum so both arms and all blocks appear on both
/// sides; the main half receives the odd row of an odd-sized stratum.
fn stratified_halves(data: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut strata: BTreeMap<(u8, i64), Vec<usize>> = BTreeMap::new();
    for i in 0..data.n() {
        let arm = u8::from(data.d[i] == 1.0);
        let block = data.block_id.as_ref().map_or(0, |b| b[i]);
        strata.entry((arm, block)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aux = Vec::with_capacity(data.n() / 2);
    let mut main = Vec::with_capacity(data.n() - data.n() / 2);
    for rows in strata.values() {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let half = rows.len() / 2;
        aux.extend_from_slice(&rows[..half]);
        main.extend_from_slice(&rows[half..]);
    }
    aux.sort_unstable();
    main.sort_unstable();
    (aux, main)
}

/// Median over splits of one summary statistic.
fn med_over<F: Fn(&EstimateSummary) -> f64>(items: &[&EstimateSummary], f: F) -> f64 {
    let vals: Vec<f64> = items.iter().map(|s| f(s)).collect();
    median(&vals)
}

/// Aggregates per-split summaries: medians of the point estimate, standard
/// error, and interval bounds; the median p-value doubled (capped at 1) when
/// more than one split contributed.
fn aggregate_summaries(
    label: &str,
    level: f64,
    items: &[&EstimateSummary],
    adjust_p: bool,
) -> EstimateSummary {
    let median_p = med_over(items, |s| s.p_value);
    let n_med = med_over(items, |s| s.n as f64).round() as usize;
    EstimateSummary {
        theta: med_over(items, |s| s.theta),
        se: med_over(items, |s| s.se),
        ci_low: med_over(items, |s| s.ci_low),
        ci_high: med_over(items, |s| s.ci_high),
        p_value: if adjust_p {
            (2.0 * median_p).min(1.0)
        } else {
            median_p
        },
        nominal_level: level,
        n: n_med,
        per_split: items.iter().map(|s| (s.theta, s.se)).collect(),
        method_label: label.to_string(),
    }
}

fn aggregate_source(
    label: String,
    fits: &[&SplitFit],
    failed: usize,
    opts: &GenericMlOptions,
    clan_chars: &[String],
) -> GenericResult {
    let used = fits.len();
    let adjust_p = used > 1;
    let mut warnings: Vec<String> = Vec::new();

    let beta1_items: Vec<&EstimateSummary> = fits.iter().map(|f| &f.blp.beta1).collect();
    let blp_beta1 = aggregate_summaries("blp_beta1", opts.level, &beta1_items, adjust_p);

    let beta2_items: Vec<&EstimateSummary> =
        fits.iter().filter_map(|f| f.blp.beta2.as_ref()).collect();
    let blp_beta2 = if beta2_items.is_empty() {
        warnings.push(
            "the effect proxy had zero variance in every usable split; \
             heterogeneity coefficient absent"
                .into(),
        );
        None
    } else {
        if beta2_items.len() < used {
            warnings.push(format!(
                "heterogeneity coefficient absent in {} of {used} splits (zero-variance proxy)",
                used - beta2_items.len()
            ));
        }
        Some(aggregate_summaries(
            "blp_beta2",
            opts.level,
            &beta2_items,
            adjust_p,
        ))
    };

    let mut gates_groups = Vec::with_capacity(opts.k_groups);
    for k in 0..opts.k_groups {
        let items: Vec<&EstimateSummary> =
            fits.iter().map(|f| &f.gates.groups[k].summary).collect();
        let flagged_splits = fits.iter().filter(|f| f.gates.groups[k].flagged).count();
        if flagged_splits > 0 {
            warnings.push(format!(
                "group {} lacked a treatment arm in {flagged_splits} of {used} splits",
                k + 1
            ));
        }
        gates_groups.push(GatesGroupSummary {
            summary: aggregate_summaries(
                &format!("gates_group_{}", k + 1),
                opts.level,
                &items,
                adjust_p,
            ),
            flagged_splits,
        });
    }
    let diff_items: Vec<&EstimateSummary> = fits
        .iter()
        .filter_map(|f| f.gates.difference.as_ref())
        .collect();
    let gates_difference = if diff_items.is_empty() {
        warnings.push("the top-vs-bottom group contrast was unavailable in every split".into());
        None
    } else {
        Some(aggregate_summaries(
            "gates_difference",
            opts.level,
            &diff_items,
            adjust_p,
        ))
    };
    let gates_monotone = gates_groups
        .windows(2)
        .all(|w| w[1].summary.theta >= w[0].summary.theta);

    let mut clan = Vec::with_capacity(clan_chars.len());
    for (c, name) in clan_chars.iter().enumerate() {
        let most: Vec<&EstimateSummary> = fits
            .iter()
            .map(|f| &f.clan.characteristics[c].mean_most)
            .collect();
        let least: Vec<&EstimateSummary> = fits
            .iter()
            .map(|f| &f.clan.characteristics[c].mean_least)
            .collect();
        let p_values: Vec<f64> = fits
            .iter()
            .map(|f| f.clan.characteristics[c].p_diff)
            .collect();
        let median_p = median(&p_values);
        let mut notes: Vec<String> = Vec::new();
        for fit in fits {
            for note in &fit.clan.characteristics[c].notes {
                if !notes.contains(note) {
                    notes.push(note.clone());
                }
            }
        }
        clan.push(ClanSummary {
            name: name.clone(),
            mean_most: aggregate_summaries(
                &format!("clan_{name}_most_affected"),
                opts.level,
                &most,
                adjust_p,
            ),
            mean_least: aggregate_summaries(
                &format!("clan_{name}_least_affected"),
                opts.level,
                &least,
                adjust_p,
            ),
            p_diff: if adjust_p {
                (2.0 * median_p).min(1.0)
            } else {
                median_p
            },
            notes,
        });
    }

    let lambda_blps: Vec<f64> = fits.iter().map(|f| f.metrics.lambda_blp).collect();
    let lambda_gates: Vec<f64> = fits.iter().map(|f| f.metrics.lambda_gates).collect();

    GenericResult {
        learner_label: label,
        blp_beta1,
        blp_beta2,
        gates_groups,
        gates_difference,
        gates_monotone,
        clan,
        lambda_blp: median(&lambda_blps),
        lambda_gates: median(&lambda_gates),
        n_splits_used: used,
        n_splits_failed: failed,
        k_groups: opts.k_groups,
        nominal_level: opts.level,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dgp;
    use crate::learners::LearnerMethod;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rct_dataset(n: usize, seed: u64) -> Dataset {
        let sample = generate_dgp("hte_forest", n, 4, &BTreeMap::new(), seed).unwrap();
        sample.dataset
    }

    fn tree_spec(seed: u64) -> LearnerSpec {
        LearnerSpec::new(LearnerMethod::Tree, seed)
    }

    /// Binary-treatment sample with a linear effect `tau = 1 + x1`, baseline
    /// `0.5 x2 + 0.5 x3`, and exactly known oracle vectors.
    fn linear_effect_rct(n: usize, seed: u64) -> (Dataset, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 4;
        let mut x = Array2::<f64>::zeros((n, p));
        for r in 0..n {
            for c in 0..p {
                x[[r, c]] = rng.sample(StandardNormal);
            }
        }
        let mut d = Array1::<f64>::zeros(n);
        let mut y = Array1::<f64>::zeros(n);
        let mut baseline = vec![0.0; n];
        let mut effect = vec![0.0; n];
        for r in 0..n {
            baseline[r] = 0.5 * x[[r, 1]] + 0.5 * x[[r, 2]];
            effect[r] = 1.0 + x[[r, 0]];
            d[r] = f64::from(rng.random::<f64>() < 0.5);
            let eps: f64 = rng.sample(StandardNormal);
            y[r] = baseline[r] + effect[r] * d[r] + eps;
        }
        let names = (1..=p).map(|i| format!("x{i}")).collect();
        let data = Dataset::new(y, d, x, None, None, None, names).unwrap();
        (data, baseline, effect)
    }

    #[test]
    fn constant_propensity_is_the_treated_share_everywhere() {
        let data = rct_dataset(300, 1);
        let model = build_propensity(&data, &PropensitySpec::Constant).unwrap();
        let share = mean(data.d.as_slice().unwrap());
        assert!(model.values.iter().all(|&v| v == share));
        assert_eq!(model.mode, "constant");
    }

    #[test]
    fn by_block_propensity_recovers_exact_block_shares() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let blocks: Vec<i64> = (0..n).map(|i| i64::from(i >= n / 2)).collect();
        // Block 0 treats 30%, block 1 treats 70%, deterministically.
        let d = Array1::from_shape_fn(n, |i| {
            if i < n / 2 {
                f64::from(i % 10 < 3)
            } else {
                f64::from(i % 10 < 7)
            }
        });
        let y = Array1::from_shape_fn(n, |i| d[i] + 0.1 * x[[i, 0]]);
        let data = Dataset::new(
            y,
            d,
            x,
            None,
            None,
            Some(blocks),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let model = build_propensity(&data, &PropensitySpec::ByBlock).unwrap();
        for i in 0..n {
            let expected = if i < n / 2 { 0.3 } else { 0.7 };
            assert!((model.values[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_armed_block_is_rejected() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let blocks: Vec<i64> = (0..n).map(|i| i64::from(i >= n / 2)).collect();
        // Second block is entirely treated.
        let d = Array1::from_shape_fn(n, |i| {
            if i < n / 2 {
                f64::from(i % 2 == 0)
            } else {
                1.0
            }
        });
        let y = Array1::from_shape_fn(n, |i| d[i]);
        let data = Dataset::new(
            y,
            d,
            x,
            None,
            None,
            Some(blocks),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let err = build_propensity(&data, &PropensitySpec::ByBlock).unwrap_err();
        assert!(err.to_string().contains("block 1"), "got: {err}");
    }

    #[test]
    fn learned_propensity_stays_clamped_and_near_truth_on_a_balanced_design() {
        let data = rct_dataset(400, 9);
        let spec = PropensitySpec::Learned {
            learner: LearnerSpec::new(LearnerMethod::Lasso, 3),
        };
        let model = build_propensity(&data, &spec).unwrap();
        assert!(model
            .values
            .iter()
            .all(|&v| (0.02..=0.98).contains(&v)));
        let avg = mean(&model.values);
        assert!((avg - 0.5).abs() < 0.1, "average propensity {avg}");
        assert_eq!(model.mode, "learned(lasso)");
    }

    #[test]
    fn proxies_vanish_when_the_outcome_ignores_treatment() {
        // Constant outcome: both arm models are the exact constant, so the
        // effect proxy is identically zero.
        let n = 120;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((n, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let d = Array1::from_shape_fn(n, |i| f64::from(i % 2 == 0));
        let y = Array1::from_elem(n, 3.25);
        let names = vec!["x1".into(), "x2".into(), "x3".into()];
        let data = Dataset::new(y, d, x, None, None, None, names).unwrap();
        let aux = data.subset(&(0..60).collect::<Vec<_>>());
        let main = data.subset(&(60..120).collect::<Vec<_>>());
        let pair = fit_proxies(&aux, &main, &tree_spec(1)).unwrap();
        assert!(pair.s_hat.iter().all(|&s| s == 0.0));
        assert!(pair.b_hat.iter().all(|&b| b == 3.25));

        // Same outcome function in both arms: a linear learner recovers it
        // almost exactly on each arm, so proxies differ only by fitting
        // noise, bounded well below the outcome scale.
        let y2 = Array1::from_shape_fn(n, |i| data.x[[i, 0]]);
        let data2 = Dataset::new(
            y2,
            data.d.clone(),
            data.x.clone(),
            None,
            None,
            None,
            data.covariate_names.clone(),
        )
        .unwrap();
        let aux2 = data2.subset(&(0..60).collect::<Vec<_>>());
        let main2 = data2.subset(&(60..120).collect::<Vec<_>>());
        let lasso = LearnerSpec::new(LearnerMethod::Lasso, 1);
        let pair2 = fit_proxies(&aux2, &main2, &lasso).unwrap();
        assert!(
            pair2.s_hat.iter().all(|&s| s.abs() < 0.25),
            "max |s_hat| = {}",
            pair2.s_hat.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
        );
    }

    #[test]
    fn proxies_recover_a_constructed_linear_effect() {
        // y = d * x1 exactly: the control model is the constant zero and the
        // treated model approximates x1, so s_hat tracks x1 on main rows.
        let n = 600;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((n, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let d = Array1::from_shape_fn(n, |i| f64::from(i % 2 == 0));
        let y = Array1::from_shape_fn(n, |i| d[i] * x[[i, 0]]);
        let names = vec!["x1".into(), "x2".into(), "x3".into()];
        let data = Dataset::new(y, d, x, None, None, None, names).unwrap();
        let aux = data.subset(&(0..300).collect::<Vec<_>>());
        let main = data.subset(&(300..600).collect::<Vec<_>>());
        let pair = fit_proxies(&aux, &main, &tree_spec(5)).unwrap();
        let x1: Vec<f64> = (0..main.n()).map(|i| main.x[[i, 0]]).collect();
        let corr = crate::stats::correlation(&pair.s_hat, &x1);
        assert!(corr > 0.9, "corr(s_hat, x1) = {corr}");
        assert!(pair.b_hat.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn stored_proxy_mean_matches_recomputation() {
        let data = rct_dataset(200, 3);
        let aux = data.subset(&(0..100).collect::<Vec<_>>());
        let main = data.subset(&(100..200).collect::<Vec<_>>());
        let pair = fit_proxies(&aux, &main, &tree_spec(2)).unwrap();
        assert!((pair.s_bar - mean(&pair.s_hat)).abs() <= 1e-12);
        pair.check_against(&main).unwrap();
    }

    #[test]
    fn single_armed_auxiliary_sample_is_rejected() {
        let data = rct_dataset(200, 4);
        let treated: Vec<usize> = (0..data.n()).filter(|&i| data.d[i] == 1.0).collect();
        let aux = data.subset(&treated);
        let err = fit_proxies(&aux, &data, &tree_spec(1)).unwrap_err();
        assert!(err.to_string().contains("lacks a treatment arm"), "got: {err}");
    }

    #[test]
    fn single_split_aggregation_is_the_identity() {
        let (data, baseline, effect) = linear_effect_rct(240, 21);
        let source = ProxySource::Oracle {
            baseline: baseline.clone(),
            effect: effect.clone(),
            label: "oracle".into(),
        };
        let mut opts = GenericMlOptions::new(77);
        opts.n_splits = 1;
        opts.level = 0.90;
        let result = run_generic_ml(&data, &[source], &PropensitySpec::Constant, &opts)
            .unwrap()
            .remove(0);

        // Reproduce the single split by hand through the public pieces.
        let split_seed = derive_seed(77, &[TAG_SPLIT, 0]);
        let (aux_idx, main_idx) = stratified_halves(&data, split_seed);
        assert!(aux_idx.len() <= main_idx.len());
        let main = data.subset(&main_idx);
        let prop = build_propensity(&data, &PropensitySpec::Constant)
            .unwrap()
            .restrict(&main_idx);
        let pair = ProxyPair::new(
            main_idx.iter().map(|&i| baseline[i]).collect(),
            main_idx.iter().map(|&i| effect[i]).collect(),
            "oracle".into(),
        )
        .unwrap();
        let blp_fit = blp(&main, &pair, &prop, 0.90).unwrap();
        let gates_fit = gates(&main, &pair, &prop, 5, 0.90).unwrap();

        assert_eq!(result.n_splits_used, 1);
        assert_eq!(result.blp_beta1, blp_fit.beta1);
        assert_eq!(result.blp_beta2, blp_fit.beta2);
        assert_eq!(
            result.gates_difference.as_ref().unwrap(),
            gates_fit.difference.as_ref().unwrap()
        );
        for (agg, single) in result.gates_groups.iter().zip(&gates_fit.groups) {
            assert_eq!(agg.summary, single.summary);
        }
    }

    #[test]
    fn repeated_runs_are_identical_and_medians_stay_in_split_range() {
        let (data, baseline, effect) = linear_effect_rct(220, 5);
        let sources = vec![
            ProxySource::Oracle {
                baseline,
                effect,
                label: "oracle".into(),
            },
            ProxySource::Learner(tree_spec(0)),
        ];
        let mut opts = GenericMlOptions::new(11);
        opts.n_splits = 6;
        let a = run_generic_ml(&data, &sources, &PropensitySpec::Constant, &opts).unwrap();
        let b = run_generic_ml(&data, &sources, &PropensitySpec::Constant, &opts).unwrap();
        assert_eq!(a, b);

        for result in &a {
            assert_eq!(result.n_splits_used, 6);
            let thetas: Vec<f64> = result.blp_beta1.per_split.iter().map(|t| t.0).collect();
            let lo = thetas.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = thetas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(result.blp_beta1.theta >= lo && result.blp_beta1.theta <= hi);
        }
    }

    #[test]
    fn oracle_proxy_run_recovers_the_average_and_heterogeneity_loadings() {
        let (data, baseline, effect) = linear_effect_rct(1200, 31);
        let true_ate = mean(&effect);
        let source = ProxySource::Oracle {
            baseline,
            effect,
            label: "oracle".into(),
        };
        let mut opts = GenericMlOptions::new(3);
        opts.n_splits = 10;
        let result = run_generic_ml(&data, &[source], &PropensitySpec::Constant, &opts)
            .unwrap()
            .remove(0);
        let beta1 = &result.blp_beta1;
        assert!(
            (beta1.theta - true_ate).abs() < 4.0 * beta1.se,
            "beta1 {} vs true {true_ate} (se {})",
            beta1.theta,
            beta1.se
        );
        let beta2 = result.blp_beta2.as_ref().expect("proxy has variance");
        assert!(
            beta2.ci_low < 1.0 && 1.0 < beta2.ci_high,
            "beta2 interval ({}, {}) should cover 1",
            beta2.ci_low,
            beta2.ci_high
        );
        assert!(result.gates_monotone, "group effects should rise with the proxy");
        assert!(result.lambda_blp > 0.0 && result.lambda_gates > 0.0);
        assert_eq!(result.n_splits_failed, 0);
    }

    #[test]
    fn strata_keep_both_arms_and_all_blocks_on_both_sides() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let blocks: Vec<i64> = (0..n).map(|i| (i % 4) as i64).collect();
        let d = Array1::from_shape_fn(n, |i| f64::from(i % 2 == 0));
        let y = Array1::from_shape_fn(n, |i| d[i] + x[[i, 0]]);
        let data = Dataset::new(
            y,
            d,
            x,
            None,
            None,
            Some(blocks.clone()),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let (aux, main) = stratified_halves(&data, 99);
        assert_eq!(aux.len() + main.len(), n);
        let mut seen = vec![false; n];
        for &i in aux.iter().chain(main.iter()) {
            assert!(!seen[i], "row {i} assigned twice");
            seen[i] = true;
        }
        for side in [&aux, &main] {
            let treated = side.iter().filter(|&&i| data.d[i] == 1.0).count();
            assert!(treated > 0 && treated < side.len());
            for block in 0..4i64 {
                assert!(side.iter().any(|&i| blocks[i] == block));
            }
        }
        // Arm-by-block counts differ by at most one across the halves.
        for arm in [0.0, 1.0] {
            for block in 0..4i64 {
                let count = |side: &[usize]| {
                    side.iter()
                        .filter(|&&i| data.d[i] == arm && blocks[i] == block)
                        .count() as i64
                };
                assert!((count(&aux) - count(&main)).abs() <= 1);
            }
        }
    }

    #[test]
    fn undersized_data_and_bad_sources_are_rejected() {
        let (data, baseline, effect) = linear_effect_rct(120, 41);
        let opts = GenericMlOptions::new(1);
        let err = run_generic_ml(
            &data.subset(&(0..80).collect::<Vec<_>>()),
            &[ProxySource::Learner(tree_spec(0))],
            &PropensitySpec::Constant,
            &opts,
        )
        .unwrap_err();
        assert!(err.to_string().contains("at least 100 rows"), "got: {err}");

        let err = run_generic_ml(&data, &[], &PropensitySpec::Constant, &opts).unwrap_err();
        assert!(err.to_string().contains("no proxy sources"), "got: {err}");

        let err = run_generic_ml(
            &data,
            &[ProxySource::Oracle {
                baseline,
                effect: effect[..50].to_vec(),
                label: "bad".into(),
            }],
            &PropensitySpec::Constant,
            &opts,
        )
        .unwrap_err();
        assert!(err.to_string().contains("one entry per row"), "got: {err}");

        let mut opts_bad = GenericMlOptions::new(1);
        opts_bad.clan_characteristics = Some(vec!["nope".into()]);
        let err = run_generic_ml(
            &data,
            &[ProxySource::Learner(tree_spec(0))],
            &PropensitySpec::Constant,
            &opts_bad,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown characteristic"), "got: {err}");
    }

    #[test]
    fn widespread_split_failures_abort_with_the_underlying_error() {
        let (data, _, _) = linear_effect_rct(120, 51);
        // Auxiliary halves hold ~30 rows per arm; demanding 40-fold
        // cross-validation needs 80, so every split fails.
        let mut spec = tree_spec(0);
        spec.cv_folds = 40;
        let mut opts = GenericMlOptions::new(2);
        opts.n_splits = 4;
        let err = run_generic_ml(
            &data,
            &[ProxySource::Learner(spec)],
            &PropensitySpec::Constant,
            &opts,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4 of 4 splits failed"), "got: {msg}");
        assert!(msg.contains("cross-validation"), "got: {msg}");
    }
}
