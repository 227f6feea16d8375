//! Honest causal forests for heterogeneous treatment effects.
//!
//! A forest aggregates honest causal trees, each grown on a subsample drawn
//! without replacement and split into disjoint structure and estimation
//! halves. Out-of-bag aggregation yields per-row effect estimates whose
//! sampling variance comes from a bias-corrected infinitesimal jackknife
//! over the subsample membership pattern. With clustered data, subsampling,
//! honesty halving, and out-of-bag bookkeeping all operate on whole
//! clusters.

mod scores;
mod tree;

pub use scores::{
    dr_scores, forest_ate, heterogeneity_test, subgroup_ate, HeterogeneityTest, PropensityMode,
    SubgroupAte, SubgroupThreshold,
};
pub(crate) use scores::summary_from_scores;
pub use tree::{grow_causal_tree, CausalTree, CfNode};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::forest::{fit_reg_forest, RegForestOptions};
use crate::stats::derive_seed;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Serialized-model format version; bump on breaking layout changes.
pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Minimum number of out-of-bag trees required for a usable per-row
/// out-of-bag estimate.
const MIN_OOB_TREES: usize = 10;

/// Attempt budget when drawing a tree subsample whose honest halves both
/// contain both treatment arms.
const SUBSAMPLE_ATTEMPTS: usize = 20;

/// Seed-derivation tags (arbitrary fixed constants keeping the forest's
/// random streams disjoint from each other and from other modules).
const TAG_TREE_SUBSAMPLE: u64 = 0xCF07;
const TAG_TUNE_DRAWS: u64 = 0x70E0;
const TAG_TUNE_OUTCOME_NUISANCE: u64 = 0x70E1;
const TAG_TUNE_TREATMENT_NUISANCE: u64 = 0x70E2;
const TAG_TUNE_TRIAL_SEED: u64 = 0x70E3;

/// Growth and sampling controls for an honest causal forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    /// Number of trees (default 2000).
    pub n_trees: usize,
    /// Fraction of sampling units drawn (without replacement) per tree;
    /// must lie strictly between 0 and 1 (default 0.5).
    pub subsample_fraction: f64,
    /// Fraction of each subsample used for split search; the remainder
    /// estimates leaf effects. Strictly between 0 and 1 (default 0.5).
    pub honesty_fraction: f64,
    /// Minimum treated rows required in every leaf's estimation half
    /// (default 5).
    pub min_treated_per_leaf: usize,
    /// Minimum control rows required in every leaf's estimation half
    /// (default 5).
    pub min_control_per_leaf: usize,
    /// Candidate variables per split; `None` resolves to `max(1, p/3)`.
    pub mtry: Option<usize>,
    /// When set, subsampling, honesty halving, and out-of-bag bookkeeping
    /// operate on whole clusters (requires cluster ids on the data).
    pub cluster_mode: bool,
    /// Base seed for all randomness in fitting and tuning.
    pub seed: u64,
}

impl ForestParams {
    pub fn new(seed: u64) -> ForestParams {
        ForestParams {
            n_trees: 2000,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            min_treated_per_leaf: 5,
            min_control_per_leaf: 5,
            mtry: None,
            cluster_mode: false,
            seed,
        }
    }

    /// Checks the data-independent constraints.
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return Err(Error::Config(format!(
                "subsample_fraction must lie strictly between 0 and 1, got {}",
                self.subsample_fraction
            )));
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return Err(Error::Config(format!(
                "honesty_fraction must lie strictly between 0 and 1, got {}",
                self.honesty_fraction
            )));
        }
        if self.min_treated_per_leaf == 0 || self.min_control_per_leaf == 0 {
            return Err(Error::Config(
                "per-leaf treated/control minima must be at least 1".into(),
            ));
        }
        if self.mtry == Some(0) {
            return Err(Error::Config("mtry must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of split candidates per node for `p` covariates.
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or((p / 3).max(1))
    }
}

/// A fitted honest causal forest, self-describing and serializable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    /// Serialized-format version; checked on load.
    pub version: u32,
    pub trees: Vec<CausalTree>,
    /// `inbag[t][u]`: sampling unit `u` was drawn into tree `t`'s subsample
    /// (either honest half).
    pub inbag: Vec<Vec<bool>>,
    /// Sampling unit of each training row (identity map without clusters).
    pub unit_of_row: Vec<usize>,
    /// Number of sampling units (rows, or clusters in cluster mode).
    pub n_units: usize,
    /// Units drawn per tree.
    pub s_units: usize,
    pub params: ForestParams,
    /// Training rows.
    pub n: usize,
    /// Covariate count.
    pub p: usize,
    pub covariate_names: Vec<String>,
    /// Fingerprint of the training dataset.
    pub fingerprint: String,
}

/// Effect predictions with jackknife variance estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatePrediction {
    /// Per-row effect estimate (NaN where `flags` is set).
    pub tau: Vec<f64>,
    /// Per-row variance estimate (NaN where `flags` is set).
    pub variance: Vec<f64>,
    /// Whether estimates are out-of-bag aggregates over training rows.
    pub oob: bool,
    /// Per-row problems (currently: too few out-of-bag trees).
    pub flags: Vec<Option<String>>,
    /// Fraction of usable rows whose bias-corrected variance was clamped
    /// up to zero.
    pub clamp_rate: f64,
}

/// Fits an honest causal forest.
///
/// Requires a binary treatment, at least 50 rows, and — in cluster mode —
/// cluster ids with at least 10 distinct clusters.
pub fn fit_causal_forest(data: &Dataset, params: &ForestParams) -> Result<ForestModel> {
    params.validate()?;
    let n = data.n();
    let p = data.p();
    if !data.is_binary_treatment() {
        return Err(Error::Data(
            "causal forest requires a binary treatment coded 0/1 with both arms present".into(),
        ));
    }
    if n < 50 {
        return Err(Error::Data(format!(
            "causal forest requires at least 50 rows, got {n}"
        )));
    }
    if let Some(m) = params.mtry {
        if m > p {
            return Err(Error::Config(format!(
                "mtry {m} exceeds the number of covariates {p}"
            )));
        }
    }
    let min_rows = 2 * (params.min_treated_per_leaf + params.min_control_per_leaf);
    if params.subsample_fraction * (n as f64) < min_rows as f64 {
        return Err(Error::Config(format!(
            "subsample_fraction {} draws fewer than {min_rows} rows at n={n}, too few to \
             satisfy the per-leaf minima in both honest halves",
            params.subsample_fraction
        )));
    }

    // Sampling units: rows, or whole clusters in cluster mode.
    let (unit_of_row, rows_of_unit) = if params.cluster_mode {
        let ids = data.cluster_id.as_ref().ok_or_else(|| {
            Error::Data("cluster mode requires cluster ids on the dataset".into())
        })?;
        let mut distinct: Vec<i64> = ids.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 10 {
            return Err(Error::Data(format!(
                "cluster mode requires at least 10 distinct clusters, got {}",
                distinct.len()
            )));
        }
        let unit_of_row: Vec<usize> = ids
            .iter()
            .map(|id| distinct.binary_search(id).unwrap())
            .collect();
        let mut rows_of_unit: Vec<Vec<usize>> = vec![Vec::new(); distinct.len()];
        for (row, &u) in unit_of_row.iter().enumerate() {
            rows_of_unit[u].push(row);
        }
        (unit_of_row, rows_of_unit)
    } else {
        ((0..n).collect(), (0..n).map(|i| vec![i]).collect())
    };
    let n_units = rows_of_unit.len();
    let s_units = ((params.subsample_fraction * n_units as f64).floor() as usize).max(2);
    if s_units >= n_units {
        return Err(Error::Config(format!(
            "subsample of {s_units} units is not smaller than the {n_units} available units"
        )));
    }
    // Units used for split search; at least one on each side of the honest
    // divide.
    let train_units = ((s_units as f64 * params.honesty_fraction).floor() as usize)
        .clamp(1, s_units - 1);

    let fitted: Result<Vec<(CausalTree, Vec<bool>)>> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            for attempt in 0..SUBSAMPLE_ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    params.seed,
                    &[TAG_TREE_SUBSAMPLE, t as u64, attempt as u64],
                ));
                // Partial Fisher–Yates draw of s_units distinct units; the
                // first `train_units` of the draw form the split-search half.
                let mut pool: Vec<usize> = (0..n_units).collect();
                for k in 0..s_units {
                    let j = rng.random_range(k..n_units);
                    pool.swap(k, j);
                }
                let expand = |units: &[usize]| -> Vec<usize> {
                    let mut rows: Vec<usize> =
                        units.iter().flat_map(|&u| rows_of_unit[u].iter().copied()).collect();
                    rows.sort_unstable();
                    rows
                };
                let train_rows = expand(&pool[..train_units]);
                let estimate_rows = expand(&pool[train_units..s_units]);
                match grow_causal_tree(data, train_rows, estimate_rows, params, &mut rng) {
                    Ok(tree) => {
                        let mut inbag = vec![false; n_units];
                        for &u in &pool[..s_units] {
                            inbag[u] = true;
                        }
                        return Ok((tree, inbag));
                    }
                    Err(_) if attempt + 1 < SUBSAMPLE_ATTEMPTS => continue,
                    Err(e) => {
                        return Err(Error::Estimation(format!(
                            "tree {t}: no subsample with both treatment arms in both honest \
                             halves after {SUBSAMPLE_ATTEMPTS} attempts (last error: {e})"
                        )))
                    }
                }
            }
            unreachable!("attempt loop always returns")
        })
        .collect();
    let fitted = fitted?;

    let mut trees = Vec::with_capacity(params.n_trees);
    let mut inbag = Vec::with_capacity(params.n_trees);
    for (tree, bag) in fitted {
        trees.push(tree);
        inbag.push(bag);
    }
    Ok(ForestModel {
        version: FOREST_FORMAT_VERSION,
        trees,
        inbag,
        unit_of_row,
        n_units,
        s_units,
        params: params.clone(),
        n,
        p,
        covariate_names: data.covariate_names.clone(),
        fingerprint: data.fingerprint(),
    })
}

/// Per-tree predictions for every row of `x`: entry `[t][j]` is tree `t`'s
/// estimate for row `j`.
fn tree_predictions(model: &ForestModel, x: &Array2<f64>) -> Vec<Vec<f64>> {
    model
        .trees
        .par_iter()
        .map(|tree| {
            (0..x.nrows())
                .map(|j| tree.predict_row(x.row(j).as_slice().unwrap()))
                .collect()
        })
        .collect()
}

fn check_prediction_input(model: &ForestModel, x: &Array2<f64>, oob: bool) -> Result<()> {
    if x.ncols() != model.p {
        return Err(Error::Data(format!(
            "prediction rows have {} covariates but the forest was fit with {}",
            x.ncols(),
            model.p
        )));
    }
    if oob && x.nrows() != model.n {
        return Err(Error::Data(format!(
            "out-of-bag prediction requires the {} training rows, got {}",
            model.n,
            x.nrows()
        )));
    }
    Ok(())
}

/// Point effect estimates without variances (cheaper path for averaging
/// and tuning). NaN marks rows with too few out-of-bag trees.
pub(crate) fn predict_tau_only(
    model: &ForestModel,
    x: &Array2<f64>,
    oob: bool,
) -> Result<Vec<f64>> {
    check_prediction_input(model, x, oob)?;
    let per_tree = tree_predictions(model, x);
    Ok(point_estimates(model, &per_tree, x.nrows(), oob).0)
}

/// Row means over admissible trees plus per-row out-of-bag tree counts.
fn point_estimates(
    model: &ForestModel,
    per_tree: &[Vec<f64>],
    m: usize,
    oob: bool,
) -> (Vec<f64>, Vec<usize>) {
    let b = model.trees.len();
    let mut tau = vec![0.0f64; m];
    let mut used = vec![0usize; m];
    if oob {
        for j in 0..m {
            let unit = model.unit_of_row[j];
            let mut s = 0.0;
            let mut k = 0usize;
            for (t, preds) in per_tree.iter().enumerate() {
                if !model.inbag[t][unit] {
                    s += preds[j];
                    k += 1;
                }
            }
            used[j] = k;
            tau[j] = if k >= MIN_OOB_TREES { s / k as f64 } else { f64::NAN };
        }
    } else {
        for j in 0..m {
            let s: f64 = per_tree.iter().map(|preds| preds[j]).sum();
            used[j] = b;
            tau[j] = s / b as f64;
        }
    }
    (tau, used)
}

/// Effect estimates with infinitesimal-jackknife variances.
///
/// With `oob` set, `x` must be the training matrix; each row is averaged
/// over the trees whose subsample excluded its sampling unit, and rows
/// with fewer than 10 such trees are flagged (NaN estimates). The variance
/// for every usable row comes from the bias-corrected infinitesimal
/// jackknife over all trees, with negative corrected values clamped to
/// zero (`clamp_rate` reports how often).
pub fn predict_cate(model: &ForestModel, x: &Array2<f64>, oob: bool) -> Result<CatePrediction> {
    check_prediction_input(model, x, oob)?;
    let m = x.nrows();
    let b = model.trees.len();
    let per_tree = tree_predictions(model, x);
    let (tau, used) = point_estimates(model, &per_tree, m, oob);
    let flags: Vec<Option<String>> = used
        .iter()
        .map(|&k| {
            if oob && k < MIN_OOB_TREES {
                Some(format!(
                    "only {k} out-of-bag trees (need {MIN_OOB_TREES}); estimate withheld"
                ))
            } else {
                None
            }
        })
        .collect();

    // Infinitesimal jackknife over subsample membership, batched as a
    // centered-membership × centered-prediction product.
    let bf = b as f64;
    let nu = model.n_units as f64;
    let su = model.s_units as f64;
    let finite_factor = (nu - 1.0) / nu * (nu / (nu - su)).powi(2);

    // Centered membership matrix (units × trees) and total membership
    // variance. Membership is 0/1, so its population variance per unit is
    // q(1-q) with q the inclusion frequency.
    let mut n_centered = Array2::<f64>::zeros((model.n_units, b));
    let mut var_n_total = 0.0f64;
    for u in 0..model.n_units {
        let count = (0..b).filter(|&t| model.inbag[t][u]).count() as f64;
        let q = count / bf;
        var_n_total += q * (1.0 - q);
        for t in 0..b {
            n_centered[[u, t]] = if model.inbag[t][u] { 1.0 - q } else { -q };
        }
    }
    // Centered prediction matrix (trees × rows) and per-row population
    // variance across trees.
    let mut t_centered = Array2::<f64>::zeros((b, m));
    let mut var_tau = vec![0.0f64; m];
    for j in 0..m {
        let mean = per_tree.iter().map(|p| p[j]).sum::<f64>() / bf;
        let mut ss = 0.0;
        for (t, preds) in per_tree.iter().enumerate() {
            let c = preds[j] - mean;
            t_centered[[t, j]] = c;
            ss += c * c;
        }
        var_tau[j] = ss / bf;
    }
    let cov = n_centered.dot(&t_centered); // units × rows, scaled by b below
    let mut variance = vec![0.0f64; m];
    let mut clamped = 0usize;
    let mut usable = 0usize;
    for j in 0..m {
        if flags[j].is_some() {
            variance[j] = f64::NAN;
            continue;
        }
        usable += 1;
        let raw: f64 = (0..model.n_units)
            .map(|u| {
                let c = cov[[u, j]] / bf;
                c * c
            })
            .sum();
        let corrected = raw - var_tau[j] * var_n_total / bf;
        if corrected < 0.0 {
            clamped += 1;
        }
        variance[j] = finite_factor * corrected.max(0.0);
    }
    let clamp_rate = if usable == 0 {
        0.0
    } else {
        clamped as f64 / usable as f64
    };
    Ok(CatePrediction {
        tau,
        variance,
        oob,
        flags,
        clamp_rate,
    })
}

/// Split-frequency importance: each internal node at depth `d < 4` scores
/// `0.95^d` for its variable; scores are normalized to sum to one and
/// returned in descending order (ties broken by column order). Empty when
/// no tree in the forest ever split.
pub fn variable_importance(model: &ForestModel) -> Vec<(String, f64)> {
    let mut weight = vec![0.0f64; model.p];
    for tree in &model.trees {
        for (var, depth) in tree.split_depths() {
            if depth <= 3 {
                weight[var] += 0.95f64.powi(depth as i32);
            }
        }
    }
    let total: f64 = weight.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut out: Vec<(String, f64)> = model
        .covariate_names
        .iter()
        .zip(&weight)
        .map(|(name, &w)| (name.clone(), w / total))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    out
}

/// Serializes a fitted forest to JSON.
pub fn forest_to_json(model: &ForestModel) -> Result<String> {
    serde_json::to_string(model)
        .map_err(|e| Error::Data(format!("forest serialization failed: {e}")))
}

/// Restores a fitted forest from JSON, rejecting unknown format versions.
pub fn forest_from_json(json: &str) -> Result<ForestModel> {
    let model: ForestModel = serde_json::from_str(json)
        .map_err(|e| Error::Data(format!("forest deserialization failed: {e}")))?;
    if model.version != FOREST_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "forest format version {} is not supported (expected {FOREST_FORMAT_VERSION})",
            model.version
        )));
    }
    Ok(model)
}

/// Writes a fitted forest to a JSON file.
pub fn save_forest(model: &ForestModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, forest_to_json(model)?)
        .map_err(|e| Error::Data(format!("writing forest to {}: {e}", path.display())))
}

/// Loads a fitted forest from a JSON file.
pub fn load_forest(path: &std::path::Path) -> Result<ForestModel> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading forest from {}: {e}", path.display())))?;
    forest_from_json(&json)
}

/// One tuning candidate and its achieved out-of-bag loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub params: ForestParams,
    /// Out-of-bag debiased squared error; infinite when the trial failed.
    pub oob_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: ForestParams,
    pub trials: Vec<TuneTrial>,
}

/// Random-search tuning of the forest's sampling and leaf-size controls.
///
/// The base parameters plus `n_draws` random candidates (subsample
/// fraction in [0.3, 0.7], mtry in 1..=p, shared leaf minimum in 1..=20)
/// are each fit and scored by the out-of-bag debiased error
/// `mean((y - m̂ - (d - ê)·τ̂)²)` against forest nuisance estimates m̂ and ê
/// held fixed across trials. The strict minimizer wins (earlier trial on
/// ties).
pub fn tune_forest(data: &Dataset, base: &ForestParams, n_draws: usize) -> Result<TuneResult> {
    base.validate()?;
    let n = data.n();
    let p = data.p();
    // Nuisance estimates shared by every trial.
    let y: Vec<f64> = data.y.to_vec();
    let d: Vec<f64> = data.d.to_vec();
    let m_opts = RegForestOptions::defaults(p, derive_seed(base.seed, &[TAG_TUNE_OUTCOME_NUISANCE]));
    let m_forest = fit_reg_forest(&data.x, &y, None, &m_opts);
    let e_opts =
        RegForestOptions::defaults(p, derive_seed(base.seed, &[TAG_TUNE_TREATMENT_NUISANCE]));
    let e_forest = fit_reg_forest(&data.x, &d, None, &e_opts);
    let m_hat: Vec<f64> = (0..n).map(|i| m_forest.predict_oob(&data.x, i)).collect();
    let e_hat: Vec<f64> = (0..n).map(|i| e_forest.predict_oob(&data.x, i)).collect();

    let mut candidates = vec![base.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, &[TAG_TUNE_DRAWS]));
    for trial in 0..n_draws {
        let mut cand = base.clone();
        cand.subsample_fraction = rng.random_range(0.3..0.7);
        cand.mtry = Some(rng.random_range(1..=p));
        let leaf_min = rng.random_range(1..=20usize);
        cand.min_treated_per_leaf = leaf_min;
        cand.min_control_per_leaf = leaf_min;
        cand.seed = derive_seed(base.seed, &[TAG_TUNE_TRIAL_SEED, trial as u64]);
        candidates.push(cand);
    }

    let trials: Vec<TuneTrial> = candidates
        .into_iter()
        .map(|params| {
            let oob_error = match fit_causal_forest(data, &params)
                .and_then(|model| predict_tau_only(&model, &data.x, true))
            {
                Ok(tau) => {
                    let mut se = 0.0f64;
                    let mut k = 0usize;
                    for i in 0..n {
                        if tau[i].is_nan() {
                            continue;
                        }
                        let r = (y[i] - m_hat[i]) - (d[i] - e_hat[i]) * tau[i];
                        se += r * r;
                        k += 1;
                    }
                    // Demand estimates for at least half the sample so a
                    // trial cannot win by predicting almost nowhere.
                    if k * 2 >= n {
                        se / k as f64
                    } else {
                        f64::INFINITY
                    }
                }
                Err(_) => f64::INFINITY,
            };
            TuneTrial { params, oob_error }
        })
        .collect();

    let mut best_idx = None;
    for (i, trial) in trials.iter().enumerate() {
        if trial.oob_error.is_finite()
            && best_idx.is_none_or(|b: usize| trial.oob_error < trials[b].oob_error)
        {
            best_idx = Some(i);
        }
    }
    let best_idx = best_idx.ok_or_else(|| {
        Error::Estimation("no tuning trial produced a usable forest".into())
    })?;
    Ok(TuneResult {
        best: trials[best_idx].params.clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dgp;
    use crate::stats::correlation;
    use std::collections::BTreeMap;

    fn hte_data(n: usize, scale: f64, seed: u64) -> crate::dataset::DgpSample {
        let mut params = BTreeMap::new();
        params.insert("scale".to_string(), scale);
        generate_dgp("hte_forest", n, 4, &params, seed).unwrap()
    }

    fn small_params(n_trees: usize, seed: u64) -> ForestParams {
        let mut p = ForestParams::new(seed);
        p.n_trees = n_trees;
        p.min_treated_per_leaf = 3;
        p.min_control_per_leaf = 3;
        p
    }

    #[test]
    fn parameter_validation_rejects_bad_settings() {
        let mut p = ForestParams::new(1);
        p.n_trees = 0;
        assert!(p.validate().is_err());
        let mut p = ForestParams::new(1);
        p.subsample_fraction = 1.0;
        assert!(p.validate().is_err());
        let mut p = ForestParams::new(1);
        p.honesty_fraction = 0.0;
        assert!(p.validate().is_err());
        let mut p = ForestParams::new(1);
        p.min_treated_per_leaf = 0;
        assert!(p.validate().is_err());
        let mut p = ForestParams::new(1);
        p.mtry = Some(0);
        assert!(p.validate().is_err());
        assert!(ForestParams::new(1).validate().is_ok());
        assert_eq!(ForestParams::new(1).resolved_mtry(10), 3);
        assert_eq!(ForestParams::new(1).resolved_mtry(2), 1);
    }

    #[test]
    fn fit_preconditions_are_enforced() {
        let sample = hte_data(80, 1.0, 3);
        // Non-binary treatment.
        let mut data = sample.dataset.clone();
        data.d[0] = 0.25;
        let err = fit_causal_forest(&data, &small_params(5, 1)).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
        // Too few rows.
        let small = sample.dataset.subset(&(0..40).collect::<Vec<_>>());
        let err = fit_causal_forest(&small, &small_params(5, 1)).unwrap_err();
        assert!(err.to_string().contains("at least 50 rows"), "{err}");
        // mtry beyond p.
        let mut p = small_params(5, 1);
        p.mtry = Some(99);
        let err = fit_causal_forest(&sample.dataset, &p).unwrap_err();
        assert!(err.to_string().contains("mtry"), "{err}");
        // Subsample too small for the leaf minima.
        let mut p = small_params(5, 1);
        p.subsample_fraction = 0.1;
        p.min_treated_per_leaf = 20;
        p.min_control_per_leaf = 20;
        let err = fit_causal_forest(&sample.dataset, &p).unwrap_err();
        assert!(err.to_string().contains("per-leaf minima"), "{err}");
        // Cluster mode without ids, then with too few clusters.
        let mut p = small_params(5, 1);
        p.cluster_mode = true;
        let err = fit_causal_forest(&sample.dataset, &p).unwrap_err();
        assert!(err.to_string().contains("cluster ids"), "{err}");
        let mut with_ids = sample.dataset.clone();
        with_ids.cluster_id = Some((0..80).map(|i| i64::from(i % 4)).collect());
        let err = fit_causal_forest(&with_ids, &p).unwrap_err();
        assert!(err.to_string().contains("at least 10 distinct"), "{err}");
    }

    #[test]
    fn honest_halves_are_disjoint_and_cover_the_drawn_units() {
        let sample = hte_data(120, 1.0, 7);
        let model = fit_causal_forest(&sample.dataset, &small_params(30, 11)).unwrap();
        assert_eq!(model.trees.len(), 30);
        for (t, tree) in model.trees.iter().enumerate() {
            let mut in_half = vec![0u8; model.n];
            for &i in &tree.train_rows {
                in_half[i] |= 1;
            }
            for &i in &tree.estimate_rows {
                assert_eq!(in_half[i] & 1, 0, "tree {t}: row {i} in both halves");
                in_half[i] |= 2;
            }
            assert_eq!(
                tree.train_rows.len() + tree.estimate_rows.len(),
                model.s_units,
                "tree {t} drew the wrong subsample size"
            );
            for (row, &mask) in in_half.iter().enumerate() {
                let drawn = mask != 0;
                assert_eq!(
                    model.inbag[t][model.unit_of_row[row]],
                    drawn,
                    "tree {t}: inbag bookkeeping disagrees for row {row}"
                );
            }
        }
    }

    #[test]
    fn full_forest_prediction_is_the_tree_mean() {
        let sample = hte_data(100, 1.0, 13);
        let model = fit_causal_forest(&sample.dataset, &small_params(12, 5)).unwrap();
        let pred = predict_cate(&model, &sample.dataset.x, false).unwrap();
        for j in 0..model.n {
            let row = sample.dataset.x.row(j);
            let row = row.as_slice().unwrap();
            let s: f64 = model.trees.iter().map(|t| t.predict_row(row)).sum();
            assert_eq!(pred.tau[j], s / model.trees.len() as f64, "row {j}");
            assert!(pred.flags[j].is_none());
        }
    }

    #[test]
    fn single_tree_forest_predicts_that_tree_with_zero_variance() {
        let sample = hte_data(100, 1.0, 17);
        let model = fit_causal_forest(&sample.dataset, &small_params(1, 5)).unwrap();
        let pred = predict_cate(&model, &sample.dataset.x, false).unwrap();
        for j in 0..model.n {
            let row = sample.dataset.x.row(j);
            assert_eq!(pred.tau[j], model.trees[0].predict_row(row.as_slice().unwrap()));
            assert_eq!(pred.variance[j], 0.0);
        }
    }

    #[test]
    fn oob_estimates_use_only_excluding_trees_and_flag_thin_rows() {
        let sample = hte_data(100, 1.0, 19);
        let model = fit_causal_forest(&sample.dataset, &small_params(40, 23)).unwrap();
        let pred = predict_cate(&model, &sample.dataset.x, true).unwrap();
        for j in 0..model.n {
            let row = sample.dataset.x.row(j);
            let row = row.as_slice().unwrap();
            let unit = model.unit_of_row[j];
            let outside: Vec<f64> = model
                .trees
                .iter()
                .enumerate()
                .filter(|(t, _)| !model.inbag[*t][unit])
                .map(|(_, tree)| tree.predict_row(row))
                .collect();
            if outside.len() >= 10 {
                let expect = outside.iter().sum::<f64>() / outside.len() as f64;
                assert_eq!(pred.tau[j], expect, "row {j}");
                assert!(pred.flags[j].is_none());
            } else {
                assert!(pred.tau[j].is_nan());
                assert!(pred.variance[j].is_nan());
                assert!(pred.flags[j].as_deref().unwrap().contains("out-of-bag"));
            }
        }
        // With a 0.5 subsample fraction and 40 trees, flagged rows should
        // not occur at all here.
        assert!(pred.flags.iter().all(|f| f.is_none()));

        // Starve one unit down to exactly 9 out-of-bag trees and the flag
        // must appear.
        let mut starved = model.clone();
        for (t, bag) in starved.inbag.iter_mut().enumerate() {
            bag[0] = t < 31;
        }
        let pred = predict_cate(&starved, &sample.dataset.x, true).unwrap();
        assert!(pred.flags[0].as_deref().unwrap().contains("only 9"));
        assert!(pred.tau[0].is_nan());
        assert!(pred.flags[1..].iter().all(|f| f.is_none()));
    }

    #[test]
    fn oob_prediction_requires_the_training_matrix() {
        let sample = hte_data(80, 1.0, 29);
        let model = fit_causal_forest(&sample.dataset, &small_params(15, 3)).unwrap();
        let shorter = sample.dataset.x.slice(ndarray::s![..40, ..]).to_owned();
        assert!(predict_cate(&model, &shorter, true).is_err());
        let narrower = sample.dataset.x.slice(ndarray::s![.., ..2]).to_owned();
        assert!(predict_cate(&model, &narrower, false).is_err());
    }

    /// Hand-built two-leaf stumps for exact variance checks.
    fn constant_tree(tau: f64) -> CausalTree {
        // A single-leaf tree built through the public growth path would
        // need data; construct directly through serde instead.
        let json = format!(
            r#"{{"nodes":[{{"Leaf":{{"tau_hat":{tau},"n_treated":5,"n_control":5}}}}],"train_rows":[0],"estimate_rows":[1]}}"#
        );
        serde_json::from_str(&json).unwrap()
    }

    fn toy_model(taus: &[f64], inbag: Vec<Vec<bool>>, n_units: usize, s_units: usize) -> ForestModel {
        let n = n_units;
        ForestModel {
            version: FOREST_FORMAT_VERSION,
            trees: taus.iter().map(|&t| constant_tree(t)).collect(),
            inbag,
            unit_of_row: (0..n).collect(),
            n_units,
            s_units,
            params: ForestParams::new(0),
            n,
            p: 1,
            covariate_names: vec!["x1".into()],
            fingerprint: "toy".into(),
        }
    }

    #[test]
    fn constant_forest_has_exact_point_and_zero_variance() {
        let inbag = vec![vec![true, true, false, false]; 4];
        let model = toy_model(&[3.0, 3.0, 3.0, 3.0], inbag, 4, 2);
        let x = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let pred = predict_cate(&model, &x, false).unwrap();
        assert_eq!(pred.tau[0], 3.0);
        assert_eq!(pred.variance[0], 0.0);

        let two = toy_model(
            &[1.0, 3.0],
            vec![vec![true, false, true, false], vec![false, true, false, true]],
            4,
            2,
        );
        let pred = predict_cate(&two, &x, false).unwrap();
        assert_eq!(pred.tau[0], 2.0);
    }

    /// Brute-force the bias-corrected jackknife with plain loops.
    fn brute_force_ij(model: &ForestModel, x: &Array2<f64>) -> Vec<f64> {
        let b = model.trees.len();
        let bf = b as f64;
        let nu = model.n_units as f64;
        let su = model.s_units as f64;
        let factor = (nu - 1.0) / nu * (nu / (nu - su)).powi(2);
        let mut out = Vec::new();
        for j in 0..x.nrows() {
            let row = x.row(j);
            let row = row.as_slice().unwrap();
            let preds: Vec<f64> = model.trees.iter().map(|t| t.predict_row(row)).collect();
            let mean = preds.iter().sum::<f64>() / bf;
            let var_tau = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / bf;
            let mut raw = 0.0;
            let mut var_n_total = 0.0;
            for u in 0..model.n_units {
                let nbar = (0..b).filter(|&t| model.inbag[t][u]).count() as f64 / bf;
                let mut cov = 0.0;
                for (t, &pred) in preds.iter().enumerate() {
                    let nit = if model.inbag[t][u] { 1.0 } else { 0.0 };
                    cov += (nit - nbar) * (pred - mean);
                }
                cov /= bf;
                raw += cov * cov;
                var_n_total += nbar * (1.0 - nbar);
            }
            let corrected = raw - var_tau * var_n_total / bf;
            out.push(factor * corrected.max(0.0));
        }
        out
    }

    #[test]
    fn jackknife_variance_matches_a_direct_recomputation() {
        let sample = hte_data(60, 1.5, 31);
        let model = fit_causal_forest(&sample.dataset, &small_params(50, 41)).unwrap();
        let x = sample.dataset.x.slice(ndarray::s![..8, ..]).to_owned();
        let pred = predict_cate(&model, &x, false).unwrap();
        let brute = brute_force_ij(&model, &x);
        for (j, &expected) in brute.iter().enumerate() {
            assert!(
                (pred.variance[j] - expected).abs() <= 1e-10,
                "row {j}: {} vs {expected}",
                pred.variance[j]
            );
            assert!(pred.variance[j].is_finite() && pred.variance[j] >= 0.0);
        }
    }

    #[test]
    fn outcome_shift_leaves_effect_estimates_unchanged() {
        let sample = hte_data(300, 1.0, 37);
        let params = small_params(40, 19);
        let model = fit_causal_forest(&sample.dataset, &params).unwrap();
        let mut shifted = sample.dataset.clone();
        shifted.y = &shifted.y + 7.0;
        let model_shift = fit_causal_forest(&shifted, &params).unwrap();
        let a = predict_cate(&model, &sample.dataset.x, true).unwrap();
        let b = predict_cate(&model_shift, &shifted.x, true).unwrap();
        for j in 0..sample.dataset.n() {
            assert!(
                (a.tau[j] - b.tau[j]).abs() <= 1e-10,
                "row {j}: {} vs {}",
                a.tau[j],
                b.tau[j]
            );
        }
    }

    #[test]
    fn fitting_is_deterministic_across_thread_counts() {
        let sample = hte_data(150, 1.0, 43);
        let params = small_params(24, 7);
        let mut outputs = Vec::new();
        for threads in [1usize, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let json = pool.install(|| {
                let model = fit_causal_forest(&sample.dataset, &params).unwrap();
                forest_to_json(&model).unwrap()
            });
            outputs.push(json);
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }

    #[test]
    fn serialization_round_trips_and_rejects_other_versions() {
        let sample = hte_data(80, 1.0, 47);
        let model = fit_causal_forest(&sample.dataset, &small_params(60, 3)).unwrap();
        let json = forest_to_json(&model).unwrap();
        let restored = forest_from_json(&json).unwrap();
        let a = predict_cate(&model, &sample.dataset.x, true).unwrap();
        let b = predict_cate(&restored, &sample.dataset.x, true).unwrap();
        assert!(a.flags.iter().all(|f| f.is_none()));
        assert_eq!(a.tau, b.tau);
        assert_eq!(model.fingerprint, restored.fingerprint);
        assert_eq!(model.fingerprint, sample.dataset.fingerprint());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        save_forest(&model, &path).unwrap();
        let from_disk = load_forest(&path).unwrap();
        assert_eq!(forest_to_json(&from_disk).unwrap(), json);

        let mut tampered: serde_json::Value = serde_json::from_str(&json).unwrap();
        tampered["version"] = serde_json::json!(99);
        let err = forest_from_json(&tampered.to_string()).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn importance_is_normalized_and_finds_the_effect_driver() {
        let sample = hte_data(500, 2.0, 53);
        let mut params = small_params(40, 29);
        params.mtry = Some(4);
        let model = fit_causal_forest(&sample.dataset, &params).unwrap();
        let imp = variable_importance(&model);
        assert_eq!(imp.len(), 4);
        let total: f64 = imp.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() <= 1e-10);
        for w in imp.windows(2) {
            assert!(w[0].1 >= w[1].1, "not descending: {imp:?}");
        }
        assert_eq!(imp[0].0, "x1", "driver not ranked first: {imp:?}");
    }

    #[test]
    fn stump_forest_has_empty_importance() {
        let inbag = vec![vec![true, false, true, false]];
        let model = toy_model(&[1.0], inbag, 4, 2);
        assert!(variable_importance(&model).is_empty());
    }

    #[test]
    fn cluster_mode_keeps_clusters_whole() {
        let sample = hte_data(120, 1.0, 59);
        let mut data = sample.dataset.clone();
        // 12 clusters of 10 rows each.
        data.cluster_id = Some((0..120).map(|i| i64::from(i / 10)).collect());
        let mut params = small_params(60, 13);
        params.cluster_mode = true;
        let model = fit_causal_forest(&data, &params).unwrap();
        assert_eq!(model.n_units, 12);
        assert_eq!(model.s_units, 6);
        for (t, tree) in model.trees.iter().enumerate() {
            for (name, rows) in [("train", &tree.train_rows), ("estimate", &tree.estimate_rows)] {
                let mut units: Vec<usize> = rows.iter().map(|&i| model.unit_of_row[i]).collect();
                units.sort_unstable();
                units.dedup();
                // Whole clusters: unit count × cluster size == row count.
                assert_eq!(
                    units.len() * 10,
                    rows.len(),
                    "tree {t}: {name} half splits a cluster"
                );
                for &u in &units {
                    assert!(model.inbag[t][u], "tree {t}: {name} unit {u} not inbag");
                }
            }
        }
        // Out-of-bag estimates exist for all rows.
        let pred = predict_cate(&model, &data.x, true).unwrap();
        assert!(pred.flags.iter().all(|f| f.is_none()));
    }

    #[test]
    fn oob_effect_estimates_track_the_true_heterogeneity() {
        let sample = hte_data(600, 1.0, 61);
        let mut params = small_params(300, 17);
        params.mtry = Some(4);
        let model = fit_causal_forest(&sample.dataset, &params).unwrap();
        let pred = predict_cate(&model, &sample.dataset.x, true).unwrap();
        let r = correlation(&pred.tau, &sample.true_cate);
        assert!(r > 0.4, "correlation with the true effects is only {r}");
    }

    #[test]
    fn tuning_scores_every_candidate_and_picks_the_minimizer() {
        let sample = hte_data(150, 1.5, 67);
        let mut base = small_params(25, 71);
        base.mtry = Some(2);
        let result = tune_forest(&sample.dataset, &base, 6).unwrap();
        assert_eq!(result.trials.len(), 7);
        assert_eq!(result.trials[0].params, base);
        let best_err = result
            .trials
            .iter()
            .map(|t| t.oob_error)
            .fold(f64::INFINITY, f64::min);
        let winner = result
            .trials
            .iter()
            .find(|t| t.params == result.best)
            .expect("winner must be among the trials");
        assert_eq!(winner.oob_error, best_err);
        assert!(best_err.is_finite());
        // Deterministic end to end.
        let again = tune_forest(&sample.dataset, &base, 6).unwrap();
        assert_eq!(again, result);
    }
}
