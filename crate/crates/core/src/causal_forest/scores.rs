//! Doubly robust inference on top of a fitted causal forest: average
//! effects, median-split heterogeneity tests, and subgroup contrasts.
//!
//! All procedures combine the forest's out-of-bag effect estimates with an
//! augmented inverse-propensity score per row, so a consistent propensity
//! or outcome model alone is enough for valid average-effect inference.

use super::{predict_tau_only, ForestModel};
use crate::dataset::Dataset;
use crate::dml::EstimateSummary;
use crate::error::{Error, Result};
use crate::learners::forest::{fit_reg_forest, RegForestOptions};
use crate::stats::{derive_seed, median, normal_quantile, two_sided_p};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

const TAG_OUTCOME_NUISANCE: u64 = 0xA7E0;
const TAG_PROPENSITY_NUISANCE: u64 = 0xA7E1;

/// Probability bounds outside which a propensity estimate counts as an
/// overlap violation (and inside which estimates are clamped).
const PROPENSITY_BOUNDS: (f64, f64) = (0.01, 0.99);

/// Maximum tolerated fraction of rows with propensity estimates outside
/// the bounds before average-effect inference is refused.
const MAX_OVERLAP_VIOLATIONS: f64 = 0.05;

/// Where treatment probabilities come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// A known constant assignment probability (randomized experiments).
    Constant(f64),
    /// Treated share within each randomization block.
    ByBlock,
    /// Out-of-bag forest regression of treatment on covariates.
    #[default]
    Estimated,
}

impl fmt::Display for PropensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensityMode::Constant(p) => write!(f, "constant({p})"),
            PropensityMode::ByBlock => write!(f, "by_block"),
            PropensityMode::Estimated => write!(f, "estimated"),
        }
    }
}

/// Per-row treatment probabilities under the requested mode; estimated and
/// block-share probabilities are overlap-checked and clamped.
pub(crate) fn propensity_scores(
    model: &ForestModel,
    data: &Dataset,
    mode: &PropensityMode,
) -> Result<Vec<f64>> {
    let n = data.n();
    match mode {
        PropensityMode::Constant(p) => {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::Config(format!(
                    "constant propensity must lie strictly between 0 and 1, got {p}"
                )));
            }
            Ok(vec![*p; n])
        }
        PropensityMode::ByBlock => {
            let blocks = data.block_id.as_ref().ok_or_else(|| {
                Error::Data("block-share propensities require block ids on the dataset".into())
            })?;
            let mut treated: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
            for (&block, &di) in blocks.iter().zip(data.d.iter()) {
                let entry = treated.entry(block).or_insert((0.0, 0.0));
                entry.0 += di;
                entry.1 += 1.0;
            }
            let mut e: Vec<f64> = (0..n)
                .map(|i| {
                    let (t, total) = treated[&blocks[i]];
                    t / total
                })
                .collect();
            enforce_overlap(&mut e)?;
            Ok(e)
        }
        PropensityMode::Estimated => {
            let d: Vec<f64> = data.d.to_vec();
            let opts = RegForestOptions {
                n_trees: model.params.n_trees,
                mtry: (data.p() / 3).max(1),
                min_leaf: 5,
                seed: derive_seed(model.params.seed, &[TAG_PROPENSITY_NUISANCE]),
            };
            let forest = fit_reg_forest(&data.x, &d, None, &opts);
            let mut e: Vec<f64> = (0..n).map(|i| forest.predict_oob(&data.x, i)).collect();
            enforce_overlap(&mut e)?;
            Ok(e)
        }
    }
}

/// Errors when too many probabilities sit outside the overlap bounds;
/// otherwise clamps the stragglers into them.
fn enforce_overlap(e: &mut [f64]) -> Result<()> {
    let (lo, hi) = PROPENSITY_BOUNDS;
    let outside = e.iter().filter(|&&v| v < lo || v > hi).count();
    let share = outside as f64 / e.len() as f64;
    if share > MAX_OVERLAP_VIOLATIONS {
        return Err(Error::Estimation(format!(
            "propensity overlap failure: {:.1}% of rows fall outside [{lo}, {hi}]",
            share * 100.0
        )));
    }
    for v in e.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok(())
}

fn check_training_data(model: &ForestModel, data: &Dataset) -> Result<()> {
    if model.fingerprint != data.fingerprint() {
        return Err(Error::Data(
            "dataset does not match the one the forest was fit on (fingerprint mismatch)".into(),
        ));
    }
    Ok(())
}

/// Doubly robust per-row effect scores on the training data: the
/// out-of-bag effect estimate plus an inverse-propensity-weighted residual
/// correction. Their mean estimates the average effect over any row
/// subset.
pub fn dr_scores(model: &ForestModel, data: &Dataset, mode: &PropensityMode) -> Result<Vec<f64>> {
    check_training_data(model, data)?;
    let n = data.n();
    let tau = predict_tau_only(model, &data.x, true)?;
    if tau.iter().any(|t| t.is_nan()) {
        return Err(Error::Estimation(
            "some rows lack out-of-bag effect estimates; grow more trees".into(),
        ));
    }
    let e = propensity_scores(model, data, mode)?;
    let y: Vec<f64> = data.y.to_vec();
    let d: Vec<f64> = data.d.to_vec();
    let opts = RegForestOptions {
        n_trees: model.params.n_trees,
        mtry: (data.p() / 3).max(1),
        min_leaf: 5,
        seed: derive_seed(model.params.seed, &[TAG_OUTCOME_NUISANCE]),
    };
    let m_forest = fit_reg_forest(&data.x, &y, None, &opts);
    let scores = (0..n)
        .map(|i| {
            let m_hat = m_forest.predict_oob(&data.x, i);
            let resid = y[i] - m_hat - (d[i] - e[i]) * tau[i];
            tau[i] + (d[i] - e[i]) / (e[i] * (1.0 - e[i])) * resid
        })
        .collect();
    Ok(scores)
}

/// Mean of the scores over `rows` with a standard error that aggregates by
/// cluster when ids are supplied.
pub(crate) fn summary_from_scores(
    scores: &[f64],
    rows: &[usize],
    label: String,
    cluster_id: Option<&[i64]>,
    nominal_level: f64,
) -> Result<EstimateSummary> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "cannot summarize scores over {n} rows"
        )));
    }
    let nf = n as f64;
    let mean = rows.iter().map(|&i| scores[i]).sum::<f64>() / nf;
    let se = match cluster_id {
        None => {
            let ss: f64 = rows
                .iter()
                .map(|&i| (scores[i] - mean) * (scores[i] - mean))
                .sum();
            (ss / (nf - 1.0) / nf).sqrt()
        }
        Some(ids) => {
            let mut per_cluster: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
            for &i in rows {
                let entry = per_cluster.entry(ids[i]).or_insert((0.0, 0.0));
                entry.0 += scores[i];
                entry.1 += 1.0;
            }
            let g = per_cluster.len() as f64;
            if per_cluster.len() < 2 {
                return Err(Error::Estimation(
                    "cluster-aggregated inference needs at least 2 clusters in the subset".into(),
                ));
            }
            let ss: f64 = per_cluster
                .values()
                .map(|&(sum, count)| {
                    let dev = sum - count * mean;
                    dev * dev
                })
                .sum();
            (g / (g - 1.0) * ss).sqrt() / nf
        }
    };
    Ok(EstimateSummary::from_point(
        label,
        n,
        mean,
        se,
        nominal_level,
        Vec::new(),
    ))
}

/// Average treatment effect from the forest's doubly robust scores.
pub fn forest_ate(
    model: &ForestModel,
    data: &Dataset,
    mode: &PropensityMode,
) -> Result<EstimateSummary> {
    let scores = dr_scores(model, data, mode)?;
    let rows: Vec<usize> = (0..data.n()).collect();
    summary_from_scores(
        &scores,
        &rows,
        format!("forest_ate(propensity={mode})"),
        data.cluster_id.as_deref(),
        0.95,
    )
}

/// Average effects above and below the median predicted effect, with a
/// confidence interval for their difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneityTest {
    pub ate_above: EstimateSummary,
    pub ate_below: EstimateSummary,
    /// Above-median minus below-median average effect.
    pub diff: f64,
    pub diff_ci: (f64, f64),
    pub warnings: Vec<String>,
}

/// Splits the sample at the median out-of-bag effect estimate and
/// contrasts the doubly robust average effects of the two halves. A
/// difference interval excluding zero is evidence of real heterogeneity.
pub fn heterogeneity_test(
    model: &ForestModel,
    data: &Dataset,
    mode: &PropensityMode,
) -> Result<HeterogeneityTest> {
    let scores = dr_scores(model, data, mode)?;
    let tau = predict_tau_only(model, &data.x, true)?;
    let med = median(&tau);
    let mut warnings = Vec::new();
    let ties = tau.iter().filter(|&&t| t == med).count();
    if ties as f64 > 0.4 * tau.len() as f64 {
        warnings.push(format!(
            "{ties} of {} effect estimates tie the median exactly; the median grouping may be \
             unstable",
            tau.len()
        ));
    }
    let below: Vec<usize> = (0..data.n()).filter(|&i| tau[i] <= med).collect();
    let above: Vec<usize> = (0..data.n()).filter(|&i| tau[i] > med).collect();
    if above.is_empty() {
        return Err(Error::Estimation(
            "no effect estimates above the median; grouping is degenerate".into(),
        ));
    }
    let cluster = data.cluster_id.as_deref();
    let ate_below = summary_from_scores(
        &scores,
        &below,
        "cate_below_median".into(),
        cluster,
        0.95,
    )?;
    let ate_above = summary_from_scores(
        &scores,
        &above,
        "cate_above_median".into(),
        cluster,
        0.95,
    )?;
    let diff = ate_above.theta - ate_below.theta;
    let z = normal_quantile(0.975);
    let width = z * (ate_above.se * ate_above.se + ate_below.se * ate_below.se).sqrt();
    Ok(HeterogeneityTest {
        ate_above,
        ate_below,
        diff,
        diff_ci: (diff - width, diff + width),
        warnings,
    })
}

/// Where to cut a covariate for a subgroup contrast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupThreshold {
    Median,
    Value(f64),
}

/// Doubly robust average effects on the two sides of a covariate cut.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupAte {
    pub covariate: String,
    /// The realized cut point.
    pub threshold: f64,
    /// Rows with covariate values at or below the cut.
    pub below: EstimateSummary,
    /// Rows above the cut.
    pub above: EstimateSummary,
    /// Two-sided p-value for equal subgroup effects.
    pub p_diff: f64,
}

/// Contrasts average effects across a covariate split (at its median or a
/// supplied value).
pub fn subgroup_ate(
    model: &ForestModel,
    data: &Dataset,
    covariate: &str,
    threshold: SubgroupThreshold,
) -> Result<SubgroupAte> {
    let col = data
        .covariate_names
        .iter()
        .position(|name| name == covariate)
        .ok_or_else(|| Error::Config(format!("unknown covariate '{covariate}'")))?;
    let values: Vec<f64> = data.x.column(col).to_vec();
    let cut = match threshold {
        SubgroupThreshold::Median => median(&values),
        SubgroupThreshold::Value(v) => v,
    };
    let below_rows: Vec<usize> = (0..data.n()).filter(|&i| values[i] <= cut).collect();
    let above_rows: Vec<usize> = (0..data.n()).filter(|&i| values[i] > cut).collect();
    if below_rows.is_empty() || above_rows.is_empty() {
        return Err(Error::Estimation(format!(
            "subgroup cut of '{covariate}' at {cut} leaves an empty side"
        )));
    }
    let scores = dr_scores(model, data, &PropensityMode::default())?;
    let cluster = data.cluster_id.as_deref();
    let below = summary_from_scores(
        &scores,
        &below_rows,
        format!("{covariate} <= {cut:.4}"),
        cluster,
        0.95,
    )?;
    let above = summary_from_scores(
        &scores,
        &above_rows,
        format!("{covariate} > {cut:.4}"),
        cluster,
        0.95,
    )?;
    let diff = above.theta - below.theta;
    let denom = (above.se * above.se + below.se * below.se).sqrt();
    let zstat = if denom > 0.0 {
        diff / denom
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    };
    Ok(SubgroupAte {
        covariate: covariate.to_string(),
        threshold: cut,
        below,
        above,
        p_diff: two_sided_p(zstat),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_forest::{fit_causal_forest, ForestParams};
    use crate::dataset::generate_dgp;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn forest_params(n_trees: usize, seed: u64) -> ForestParams {
        let mut p = ForestParams::new(seed);
        p.n_trees = n_trees;
        p.min_treated_per_leaf = 3;
        p.min_control_per_leaf = 3;
        p.mtry = Some(4);
        p
    }

    fn hte_sample(n: usize, scale: f64, seed: u64) -> crate::dataset::DgpSample {
        let mut params = BTreeMap::new();
        params.insert("scale".to_string(), scale);
        generate_dgp("hte_forest", n, 4, &params, seed).unwrap()
    }

    #[test]
    fn null_effect_ate_is_near_zero() {
        let mut params = BTreeMap::new();
        params.insert("tau".to_string(), 0.0);
        let sample = generate_dgp("hte_null", 400, 4, &params, 101).unwrap();
        let model = fit_causal_forest(&sample.dataset, &forest_params(150, 7)).unwrap();
        let ate = forest_ate(&model, &sample.dataset, &PropensityMode::Constant(0.5)).unwrap();
        assert!(
            ate.theta.abs() <= 3.0 * ate.se,
            "null ATE {} with se {}",
            ate.theta,
            ate.se
        );
        assert!(ate.se > 0.0);
    }

    #[test]
    fn ate_recovers_the_known_average_effect() {
        let sample = hte_sample(500, 1.0, 103);
        let truth = sample.true_ate;
        let model = fit_causal_forest(&sample.dataset, &forest_params(200, 11)).unwrap();
        for mode in [PropensityMode::Constant(0.5), PropensityMode::Estimated] {
            let ate = forest_ate(&model, &sample.dataset, &mode).unwrap();
            assert!(
                (ate.theta - truth).abs() <= 3.0 * ate.se,
                "mode {mode}: ATE {} vs truth {truth} (se {})",
                ate.theta,
                ate.se
            );
        }
    }

    #[test]
    fn heterogeneity_test_detects_strong_variation() {
        let sample = hte_sample(600, 2.0, 107);
        let model = fit_causal_forest(&sample.dataset, &forest_params(200, 13)).unwrap();
        let het =
            heterogeneity_test(&model, &sample.dataset, &PropensityMode::Constant(0.5)).unwrap();
        assert!(het.diff > 0.0, "diff {}", het.diff);
        assert!(
            het.diff_ci.0 > 0.0,
            "interval {:?} should exclude zero",
            het.diff_ci
        );
        assert!(het.warnings.is_empty());
        assert_eq!(
            het.diff,
            het.ate_above.theta - het.ate_below.theta
        );
    }

    #[test]
    fn heterogeneity_test_accepts_the_null() {
        // Constant-effect data. Grouping rows by the forest's own
        // out-of-bag effect estimates couples the grouping to the score
        // noise, so calibration needs deep trees over small subsamples
        // (narrow leaves spread the estimate field, which weakens the
        // rank-selection coupling).
        let mut params = BTreeMap::new();
        params.insert("tau".to_string(), 0.5);
        let sample = generate_dgp("hte_null", 2000, 10, &params, 100).unwrap();
        let mut fp = ForestParams::new(17);
        fp.n_trees = 300;
        fp.min_treated_per_leaf = 2;
        fp.min_control_per_leaf = 2;
        fp.subsample_fraction = 0.25;
        fp.mtry = Some(3);
        let model = fit_causal_forest(&sample.dataset, &fp).unwrap();
        let het =
            heterogeneity_test(&model, &sample.dataset, &PropensityMode::Constant(0.5)).unwrap();
        assert!(
            het.diff_ci.0 <= 0.0 && het.diff_ci.1 >= 0.0,
            "interval {:?} should contain zero",
            het.diff_ci
        );
    }

    #[test]
    fn subgroup_contrast_finds_the_driver_and_validates_inputs() {
        let sample = hte_sample(600, 2.0, 113);
        let model = fit_causal_forest(&sample.dataset, &forest_params(200, 19)).unwrap();
        let sub = subgroup_ate(&model, &sample.dataset, "x1", SubgroupThreshold::Median).unwrap();
        assert!(
            sub.above.theta > sub.below.theta,
            "above {} vs below {}",
            sub.above.theta,
            sub.below.theta
        );
        assert!(sub.p_diff < 0.05, "p {}", sub.p_diff);

        let err =
            subgroup_ate(&model, &sample.dataset, "nope", SubgroupThreshold::Median).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = subgroup_ate(
            &model,
            &sample.dataset,
            "x1",
            SubgroupThreshold::Value(1e12),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty side"), "{err}");
    }

    #[test]
    fn block_share_propensities_are_exact_and_overlap_checked() {
        // Two blocks with treated shares 0.4 and 0.6.
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let d = Array1::from_shape_fn(n, |i| {
            if i < 50 {
                f64::from(i % 10 < 4)
            } else {
                f64::from(i % 10 < 6)
            }
        });
        let y = Array1::from_shape_fn(n, |i| d[i] + x[[i, 0]]);
        let mut data =
            Dataset::new(y, d, x, None, None, None, vec!["a".into(), "b".into()]).unwrap();
        data.block_id = Some((0..n).map(|i| i64::from(i >= 50)).collect());
        let model_stub = {
            let sample = hte_sample(60, 1.0, 5);
            fit_causal_forest(&sample.dataset, &forest_params(10, 3)).unwrap()
        };
        let e = propensity_scores(&model_stub, &data, &PropensityMode::ByBlock).unwrap();
        for (i, &v) in e.iter().enumerate() {
            let expect = if i < 50 { 0.4 } else { 0.6 };
            assert_eq!(v, expect, "row {i}");
        }

        // An all-treated block covering most rows trips the overlap check.
        data.block_id = Some((0..n).map(|i| i64::from(i >= 10)).collect());
        let mut d_bad = data.d.clone();
        for i in 10..n {
            d_bad[i] = 1.0;
        }
        data.d = d_bad;
        let err = propensity_scores(&model_stub, &data, &PropensityMode::ByBlock).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn constant_propensity_must_be_a_probability() {
        let sample = hte_sample(60, 1.0, 7);
        let model = fit_causal_forest(&sample.dataset, &forest_params(10, 3)).unwrap();
        for bad in [0.0, 1.0, -0.2, 1.7] {
            let err =
                propensity_scores(&model, &sample.dataset, &PropensityMode::Constant(bad))
                    .unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn deterministic_assignment_fails_the_overlap_check() {
        // Treatment is a deterministic covariate threshold, so estimated
        // propensities pile up near 0 and 1.
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let d = Array1::from_shape_fn(n, |i| f64::from(x[[i, 0]] > 0.0));
        let y = Array1::from_shape_fn(n, |i| d[i] + x[[i, 1]]);
        let data = Dataset::new(y, d, x, None, None, None, vec!["a".into(), "b".into()]).unwrap();
        let params = forest_params(80, 23);
        let mut p = params.clone();
        p.mtry = Some(2);
        let model = fit_causal_forest(&data, &p).unwrap();
        let err = forest_ate(&model, &data, &PropensityMode::Estimated).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let sample = hte_sample(100, 1.0, 11);
        let model = fit_causal_forest(&sample.dataset, &forest_params(20, 3)).unwrap();
        let other = hte_sample(100, 1.0, 12);
        let err =
            forest_ate(&model, &other.dataset, &PropensityMode::Constant(0.5)).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }

    #[test]
    fn score_summaries_aggregate_by_cluster() {
        // Singleton clusters reproduce the unclustered standard error.
        let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows: Vec<usize> = (0..40).collect();
        let singleton_ids: Vec<i64> = (0..40).collect();
        let plain =
            summary_from_scores(&scores, &rows, "plain".into(), None, 0.95).unwrap();
        let singles = summary_from_scores(
            &scores,
            &rows,
            "singles".into(),
            Some(&singleton_ids),
            0.95,
        )
        .unwrap();
        assert!((plain.se - singles.se).abs() <= 1e-12);
        assert_eq!(plain.theta, singles.theta);

        // Duplicating every score within two-row clusters roughly doubles
        // the squared standard error relative to treating rows as
        // independent.
        let doubled: Vec<f64> = scores.iter().flat_map(|&s| [s, s]).collect();
        let rows2: Vec<usize> = (0..80).collect();
        let pair_ids: Vec<i64> = (0..80).map(|i| i / 2).collect();
        let naive =
            summary_from_scores(&doubled, &rows2, "naive".into(), None, 0.95).unwrap();
        let clustered = summary_from_scores(
            &doubled,
            &rows2,
            "clustered".into(),
            Some(&pair_ids),
            0.95,
        )
        .unwrap();
        let ratio = (clustered.se / naive.se).powi(2);
        assert!(
            (1.5..=2.5).contains(&ratio),
            "variance inflation {ratio} outside the expected range"
        );
    }
}
