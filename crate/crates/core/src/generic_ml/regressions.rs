//! Main-sample regressions on proxy predictions: the best-linear-predictor
//! fit whose slope on the centered effect proxy measures captured
//! heterogeneity, per-quantile-group average effects, group characteristic
//! comparisons, and the scalar metrics used to rank proxy learners.

use super::{PropensityModel, ProxyPair};
use crate::causal_forest::summary_from_scores;
use crate::dataset::Dataset;
use crate::dml::EstimateSummary;
use crate::error::{Error, Result};
use crate::learners::{weighted_ols, VarianceMode, WolsFit};
use crate::stats::{two_sided_p, variance};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const COL_INTERCEPT: &str = "intercept";
const COL_BASELINE: &str = "baseline";
const COL_TREATMENT: &str = "treatment";
const COL_TREATMENT_PROXY: &str = "treatment_x_proxy";

/// Best-linear-predictor regression results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlpFit {
    /// Coefficient on the centered treatment: the average effect.
    pub beta1: EstimateSummary,
    /// Coefficient on centered treatment times centered proxy: the
    /// heterogeneity loading. Absent when the proxy has zero variance.
    pub beta2: Option<EstimateSummary>,
    pub n: usize,
    pub warnings: Vec<String>,
}

/// One proxy quantile group's effect estimate and composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesGroup {
    pub summary: EstimateSummary,
    pub n_rows: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// True when the group lacks one treatment arm, so its coefficient is
    /// not a within-group treated-control contrast.
    pub flagged: bool,
}

/// Group average effects over proxy quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesFit {
    /// Lowest proxy group first.
    pub groups: Vec<GatesGroup>,
    /// Top-group minus bottom-group effect, from the joint covariance;
    /// absent when an end group is flagged.
    pub difference: Option<EstimateSummary>,
    /// Group index of each main-sample row.
    pub group_of_row: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Mean comparison of one characteristic across the extreme proxy groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClanCharacteristic {
    pub name: String,
    pub mean_most: EstimateSummary,
    pub mean_least: EstimateSummary,
    /// Two-sample difference p-value (cluster-aware when ids are present).
    pub p_diff: f64,
    pub notes: Vec<String>,
}

/// Characteristic means of the most- and least-affected proxy groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClanFit {
    pub characteristics: Vec<ClanCharacteristic>,
    /// Group index of each main-sample row; identical to the grouping used
    /// by the group-effects regression.
    pub group_of_row: Vec<usize>,
}

/// Scalar ranking metrics for proxy learners; larger is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    /// Squared heterogeneity loading times the proxy variance.
    pub lambda_blp: f64,
    /// Mean squared group effect.
    pub lambda_gates: f64,
}

/// Assigns each row to one of `k_groups` quantile groups of `s_hat`,
/// breaking ties by row index so group sizes differ by at most one.
pub(crate) fn proxy_groups(s_hat: &[f64], k_groups: usize) -> Result<Vec<usize>> {
    let n = s_hat.len();
    if k_groups < 2 {
        return Err(Error::Config(format!(
            "k_groups must be at least 2, got {k_groups}"
        )));
    }
    if n < k_groups {
        return Err(Error::Config(format!(
            "cannot form {k_groups} proxy groups from {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s_hat[a].total_cmp(&s_hat[b]).then(a.cmp(&b)));
    let mut group = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        group[row] = pos * k_groups / n;
    }
    Ok(group)
}

fn shared_checks(
    main: &Dataset,
    proxies: &ProxyPair,
    prop: &PropensityModel,
    level: f64,
) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if !main.is_binary_treatment() {
        return Err(Error::Data(
            "proxy regressions require a binary treatment coded 0/1".into(),
        ));
    }
    proxies.check_against(main)?;
    prop.check_against(main.n())?;
    Ok(())
}

/// Inverse `p(1-p)` weights.
fn regression_weights(propensity: &[f64]) -> Vec<f64> {
    propensity.iter().map(|&p| 1.0 / (p * (1.0 - p))).collect()
}

fn centered_treatment(main: &Dataset, prop: &PropensityModel) -> Vec<f64> {
    main.d
        .iter()
        .zip(&prop.values)
        .map(|(&d, &p)| d - p)
        .collect()
}

/// Weighted least squares of the main outcome on an intercept, the baseline
/// proxy, and `tail` columns; cluster-robust variance when the sample has
/// cluster ids. A constant baseline is dropped up front, and a rank-deficient
/// design is retried without the baseline before giving up.
fn fit_with_optional_baseline(
    main: &Dataset,
    b_hat: &[f64],
    tail: &[(String, Vec<f64>)],
    weights: &[f64],
    warnings: &mut Vec<String>,
) -> Result<WolsFit> {
    let n = main.n();
    let assemble = |with_baseline: bool| -> (Array2<f64>, Vec<String>) {
        let mut names = vec![COL_INTERCEPT.to_string()];
        if with_baseline {
            names.push(COL_BASELINE.to_string());
        }
        names.extend(tail.iter().map(|(name, _)| name.clone()));
        let mut x = Array2::<f64>::zeros((n, names.len()));
        for i in 0..n {
            x[[i, 0]] = 1.0;
            let mut j = 1;
            if with_baseline {
                x[[i, j]] = b_hat[i];
                j += 1;
            }
            for (_, col) in tail {
                x[[i, j]] = col[i];
                j += 1;
            }
        }
        (x, names)
    };
    let fit = |x: &Array2<f64>, names: &[String]| -> Result<WolsFit> {
        let (mode, ids) = match &main.cluster_id {
            Some(ids) => (VarianceMode::ClusterRobust, Some(ids.as_slice())),
            None => (VarianceMode::HcRobust, None),
        };
        weighted_ols(x, main.y.as_slice().unwrap(), Some(weights), Some(names), mode, ids)
    };

    let baseline_constant = b_hat.iter().all(|&b| b == b_hat[0]);
    if baseline_constant {
        warnings.push(
            "baseline proxy is constant; dropped from the regression as collinear \
             with the intercept"
                .into(),
        );
        let (x, names) = assemble(false);
        return fit(&x, &names);
    }
    let (x, names) = assemble(true);
    match fit(&x, &names) {
        Ok(result) => Ok(result),
        Err(Error::Estimation(msg)) if msg.contains("rank deficient") => {
            warnings.push(format!("baseline proxy dropped from the regression ({msg})"));
            let (x, names) = assemble(false);
            fit(&x, &names)
        }
        Err(e) => Err(e),
    }
}

fn coefficient_summary(
    fit: &WolsFit,
    column: &str,
    label: &str,
    n: usize,
    level: f64,
) -> EstimateSummary {
    let j = fit
        .names
        .iter()
        .position(|name| name == column)
        .expect("column present by construction");
    let theta = fit.coefficients[j];
    let se = fit.se(j);
    EstimateSummary::from_point(label.to_string(), n, theta, se, level, vec![(theta, se)])
}

/// Weighted regression of the outcome on the baseline proxy, the centered
/// treatment, and the centered treatment times the centered effect proxy.
///
/// The centered-treatment coefficient estimates the average effect; the
/// interaction coefficient measures how much of the effect variation the
/// proxy captures (1 when the proxy equals the true effect function, 0 when
/// effects are homogeneous or the proxy is pure noise).
pub fn blp(
    main: &Dataset,
    proxies: &ProxyPair,
    prop: &PropensityModel,
    level: f64,
) -> Result<BlpFit> {
    shared_checks(main, proxies, prop, level)?;
    let n = main.n();
    let weights = regression_weights(&prop.values);
    let d_centered = centered_treatment(main, prop);
    let mut warnings = Vec::new();

    let mut tail = vec![(COL_TREATMENT.to_string(), d_centered.clone())];
    // A constant proxy can carry rounding noise of order ulp(s_bar), which
    // would otherwise produce a near-zero interaction column and a spurious
    // rank-deficiency failure; anything with genuine variation sits many
    // orders of magnitude above this threshold.
    let include_proxy =
        variance(&proxies.s_hat) > 1e-24 * (1.0 + proxies.s_bar * proxies.s_bar);
    if include_proxy {
        let interaction: Vec<f64> = d_centered
            .iter()
            .zip(&proxies.s_hat)
            .map(|(&dc, &s)| dc * (s - proxies.s_bar))
            .collect();
        tail.push((COL_TREATMENT_PROXY.to_string(), interaction));
    } else {
        warnings.push(
            "effect proxy has zero variance; the heterogeneity coefficient is omitted".into(),
        );
    }

    let fit = fit_with_optional_baseline(main, &proxies.b_hat, &tail, &weights, &mut warnings)?;
    warnings.extend(fit.warnings.iter().cloned());
    let beta1 = coefficient_summary(&fit, COL_TREATMENT, "blp_beta1", n, level);
    let beta2 = include_proxy
        .then(|| coefficient_summary(&fit, COL_TREATMENT_PROXY, "blp_beta2", n, level));
    Ok(BlpFit {
        beta1,
        beta2,
        n,
        warnings,
    })
}

/// Average effect within each proxy quantile group, from one weighted
/// regression of the outcome on the baseline proxy and per-group centered
/// treatment indicators, plus the top-vs-bottom contrast.
pub fn gates(
    main: &Dataset,
    proxies: &ProxyPair,
    prop: &PropensityModel,
    k_groups: usize,
    level: f64,
) -> Result<GatesFit> {
    shared_checks(main, proxies, prop, level)?;
    let group_of_row = proxy_groups(&proxies.s_hat, k_groups)?;
    gates_with_groups(main, proxies, prop, group_of_row, level)
}

/// [`gates`] with a precomputed group assignment (shared with the
/// characteristic comparison so both analyses use identical groups).
pub(crate) fn gates_with_groups(
    main: &Dataset,
    proxies: &ProxyPair,
    prop: &PropensityModel,
    group_of_row: Vec<usize>,
    level: f64,
) -> Result<GatesFit> {
    shared_checks(main, proxies, prop, level)?;
    let n = main.n();
    let k_groups = group_of_row.iter().max().map_or(0, |&g| g + 1);
    let weights = regression_weights(&prop.values);
    let d_centered = centered_treatment(main, prop);
    let mut warnings = Vec::new();

    let tail: Vec<(String, Vec<f64>)> = (0..k_groups)
        .map(|k| {
            let col: Vec<f64> = (0..n)
                .map(|i| if group_of_row[i] == k { d_centered[i] } else { 0.0 })
                .collect();
            (format!("group_{}", k + 1), col)
        })
        .collect();
    let fit = fit_with_optional_baseline(main, &proxies.b_hat, &tail, &weights, &mut warnings)?;
    warnings.extend(fit.warnings.iter().cloned());

    let mut groups = Vec::with_capacity(k_groups);
    for k in 0..k_groups {
        let rows: Vec<usize> = (0..n).filter(|&i| group_of_row[i] == k).collect();
        let n_treated = rows.iter().filter(|&&i| main.d[i] == 1.0).count();
        let n_control = rows.len() - n_treated;
        let flagged = n_treated == 0 || n_control == 0;
        if flagged {
            warnings.push(format!(
                "group {} lacks a treatment arm ({} treated, {} control); its \
                 coefficient is not a within-group contrast",
                k + 1,
                n_treated,
                n_control
            ));
        }
        groups.push(GatesGroup {
            summary: coefficient_summary(
                &fit,
                &format!("group_{}", k + 1),
                &format!("gates_group_{}", k + 1),
                rows.len(),
                level,
            ),
            n_rows: rows.len(),
            n_treated,
            n_control,
            flagged,
        });
    }

    let difference = if groups.first().is_some_and(|g| !g.flagged)
        && groups.last().is_some_and(|g| !g.flagged)
        && k_groups >= 2
    {
        let j_bottom = fit.names.iter().position(|c| c == "group_1").unwrap();
        let j_top = fit
            .names
            .iter()
            .position(|c| *c == format!("group_{k_groups}"))
            .unwrap();
        let theta = fit.coefficients[j_top] - fit.coefficients[j_bottom];
        let var = fit.vcov[[j_top, j_top]] + fit.vcov[[j_bottom, j_bottom]]
            - 2.0 * fit.vcov[[j_top, j_bottom]];
        let se = var.max(0.0).sqrt();
        Some(EstimateSummary::from_point(
            "gates_difference".to_string(),
            n,
            theta,
            se,
            level,
            vec![(theta, se)],
        ))
    } else {
        warnings.push(
            "an end group lacks a treatment arm; the top-vs-bottom contrast is omitted".into(),
        );
        None
    };

    Ok(GatesFit {
        groups,
        difference,
        group_of_row,
        warnings,
    })
}

/// Mean of each named characteristic in the most- and least-affected proxy
/// groups, with a two-sample difference test (cluster-aware when the sample
/// has cluster ids).
pub fn clan(
    main: &Dataset,
    proxies: &ProxyPair,
    characteristics: &[String],
    k_groups: usize,
    level: f64,
) -> Result<ClanFit> {
    proxies.check_against(main)?;
    let group_of_row = proxy_groups(&proxies.s_hat, k_groups)?;
    clan_with_groups(main, &group_of_row, k_groups, characteristics, level)
}

/// [`clan`] with the precomputed group assignment shared with the
/// group-effects regression.
pub(crate) fn clan_with_groups(
    main: &Dataset,
    group_of_row: &[usize],
    k_groups: usize,
    characteristics: &[String],
    level: f64,
) -> Result<ClanFit> {
    if group_of_row.len() != main.n() {
        return Err(Error::Data(
            "group assignment does not cover the main sample".into(),
        ));
    }
    let least_rows: Vec<usize> = (0..main.n()).filter(|&i| group_of_row[i] == 0).collect();
    let most_rows: Vec<usize> = (0..main.n())
        .filter(|&i| group_of_row[i] == k_groups - 1)
        .collect();
    let cluster = main.cluster_id.as_deref();

    let mut out = Vec::with_capacity(characteristics.len());
    for name in characteristics {
        let col = main
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown characteristic '{name}'")))?;
        let values: Vec<f64> = (0..main.n()).map(|i| main.x[[i, col]]).collect();
        let mean_most = summary_from_scores(
            &values,
            &most_rows,
            format!("clan_{name}_most_affected"),
            cluster,
            level,
        )?;
        let mean_least = summary_from_scores(
            &values,
            &least_rows,
            format!("clan_{name}_least_affected"),
            cluster,
            level,
        )?;
        let mut notes = Vec::new();
        let p_diff = if values.iter().all(|&v| v == values[0]) {
            notes.push(format!(
                "characteristic '{name}' has zero variance; the group comparison is vacuous"
            ));
            1.0
        } else {
            let diff = mean_most.theta - mean_least.theta;
            let se = (mean_most.se * mean_most.se + mean_least.se * mean_least.se).sqrt();
            if se > 0.0 {
                two_sided_p(diff / se)
            } else if diff == 0.0 {
                1.0
            } else {
                0.0
            }
        };
        out.push(ClanCharacteristic {
            name: name.clone(),
            mean_most,
            mean_least,
            p_diff,
            notes,
        });
    }
    Ok(ClanFit {
        characteristics: out,
        group_of_row: group_of_row.to_vec(),
    })
}

/// Scalar metrics for ranking proxy learners: the squared heterogeneity
/// loading scaled by the proxy variance, and the mean squared group effect.
/// An absent heterogeneity loading scores zero.
pub fn best_metrics(blp_fit: &BlpFit, gates_fit: &GatesFit, proxies: &ProxyPair) -> BestMetrics {
    let lambda_blp = blp_fit
        .beta2
        .as_ref()
        .map_or(0.0, |b| b.theta * b.theta * variance(&proxies.s_hat));
    let k = gates_fit.groups.len();
    let lambda_gates = if k == 0 {
        0.0
    } else {
        gates_fit
            .groups
            .iter()
            .map(|g| g.summary.theta * g.summary.theta)
            .sum::<f64>()
            / k as f64
    };
    BestMetrics {
        lambda_blp,
        lambda_gates,
    }
}
