//! Debiased estimation of the average treatment effect in partially linear
//! models, optionally with instruments.
//!
//! The effect of the covariates is partialed out of the outcome and the
//! treatment (and the instrument, if any) with cross-fitted learners: each
//! fold's residuals come from nuisance models trained strictly on the other
//! folds. Residual-on-residual regression then yields the effect estimate,
//! and the whole procedure repeats over independent fold draws, aggregated
//! by the median (or mean) with a split-variability inflation of the
//! standard error.

use crate::dataset::{make_split_plan, Dataset};
use crate::error::{Error, Result};
use crate::learners::{fit_learner, LearnerSpec};
use crate::stats::{derive_seed, mean, median, normal_quantile, two_sided_p};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How per-repetition estimates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Median,
    Mean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Median => "median",
            Aggregation::Mean => "mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Aggregation::Median),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!(
                "unknown aggregation '{other}'; expected median or mean"
            ))),
        }
    }
}

/// Configuration for the cross-fitted estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmlConfig {
    /// Outcome-nuisance learner (outcome on covariates).
    pub learner_g: LearnerSpec,
    /// Treatment-nuisance learner (treatment on covariates).
    pub learner_m: LearnerSpec,
    /// Instrument-nuisance learner; defaults to the treatment learner's
    /// family when absent (instrumented runs only).
    pub learner_r: Option<LearnerSpec>,
    pub k_folds: usize,
    pub s_repetitions: usize,
    pub aggregation: Aggregation,
    /// Confidence level for reported intervals.
    pub nominal_level: f64,
    pub seed: u64,
}

impl DmlConfig {
    pub fn new(learner_g: LearnerSpec, learner_m: LearnerSpec, seed: u64) -> Self {
        DmlConfig {
            learner_g,
            learner_m,
            learner_r: None,
            k_folds: 2,
            s_repetitions: 100,
            aggregation: Aggregation::Median,
            nominal_level: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config(format!(
                "k_folds must be at least 2, got {}",
                self.k_folds
            )));
        }
        if self.s_repetitions < 1 {
            return Err(Error::Config("s_repetitions must be at least 1".into()));
        }
        if !(self.nominal_level > 0.0 && self.nominal_level < 1.0) {
            return Err(Error::Config(format!(
                "nominal_level must lie in (0, 1), got {}",
                self.nominal_level
            )));
        }
        self.learner_g.validate()?;
        self.learner_m.validate()?;
        if let Some(r) = &self.learner_r {
            r.validate()?;
        }
        Ok(())
    }
}

/// A point estimate with inference detail and the per-repetition history
/// behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub theta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub nominal_level: f64,
    pub n: usize,
    /// (theta_s, se_s) for every repetition, in repetition order.
    pub per_split: Vec<(f64, f64)>,
    pub method_label: String,
}

impl EstimateSummary {
    /// Builds a summary by aggregating per-repetition estimates and
    /// attaching a symmetric normal-reference interval and p-value.
    pub fn from_splits(
        method_label: String,
        n: usize,
        per_split: Vec<(f64, f64)>,
        aggregation: Aggregation,
        nominal_level: f64,
    ) -> EstimateSummary {
        let (theta, se) = aggregate_splits(&per_split, aggregation);
        EstimateSummary::from_point(method_label, n, theta, se, nominal_level, per_split)
    }

    /// Builds a summary from a single (theta, se) pair.
    pub fn from_point(
        method_label: String,
        n: usize,
        theta: f64,
        se: f64,
        nominal_level: f64,
        per_split: Vec<(f64, f64)>,
    ) -> EstimateSummary {
        let z = normal_quantile(0.5 + nominal_level / 2.0);
        let zstat = if se > 0.0 {
            theta / se
        } else if theta == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(theta)
        };
        EstimateSummary {
            theta,
            se,
            ci_low: theta - z * se,
            ci_high: theta + z * se,
            p_value: two_sided_p(zstat),
            nominal_level,
            n,
            per_split,
            method_label,
        }
    }
}

/// No-intercept regression of `w` on `v`: the effect estimate after
/// partialling out, `theta = sum(v*w) / sum(v^2)`, with the
/// heteroskedasticity-robust standard error (the same `n/(n-k)`
/// small-sample factor as the weighted least-squares module, `k = 1`).
pub fn residual_regression(v: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    instrumented_regression(v, v, w).map_err(|e| match e {
        Error::Estimation(_) => {
            Error::Estimation("treatment fully explained by covariates".into())
        }
        other => other,
    })
}

/// Instrumented residual regression: `theta = sum(z*w) / sum(z*v)` with the
/// IV-robust standard error. With `z = v` this is exactly
/// [`residual_regression`].
pub fn iv_residual_regression(z: &[f64], v: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    instrumented_regression(z, v, w)
}

fn instrumented_regression(z: &[f64], v: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let n = v.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "residual regression needs at least 2 observations, got {n}"
        )));
    }
    if z.len() != n || w.len() != n {
        return Err(Error::Data(format!(
            "residual vectors have mismatched lengths ({}, {}, {})",
            z.len(),
            n,
            w.len()
        )));
    }
    let szv: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
    if szv.abs() < 1e-10 * n as f64 {
        return Err(Error::Estimation("weak residual instrument".into()));
    }
    let szw: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
    let theta = szw / szv;
    let meat: f64 = (0..n)
        .map(|i| {
            let e = w[i] - theta * v[i];
            (z[i] * e) * (z[i] * e)
        })
        .sum();
    let se = (meat * n as f64 / (n - 1) as f64).sqrt() / szv.abs();
    Ok((theta, se))
}

/// Combines per-repetition (theta_s, se_s) pairs.
///
/// Median mode returns the median theta and the median of
/// `sqrt(se_s^2 + (theta_s - theta)^2)`, inflating each repetition's
/// standard error by its distance from the aggregate so the spread across
/// fold draws is priced in. Mean mode uses means of the same quantities.
pub fn aggregate_splits(per_split: &[(f64, f64)], mode: Aggregation) -> (f64, f64) {
    assert!(!per_split.is_empty(), "no repetitions to aggregate");
    let thetas: Vec<f64> = per_split.iter().map(|(t, _)| *t).collect();
    let center = match mode {
        Aggregation::Median => median(&thetas),
        Aggregation::Mean => mean(&thetas),
    };
    let inflated: Vec<f64> = per_split
        .iter()
        .map(|(t, s)| (s * s + (t - center) * (t - center)).sqrt())
        .collect();
    let se = match mode {
        Aggregation::Median => median(&inflated),
        Aggregation::Mean => mean(&inflated),
    };
    (center, se)
}

/// One repetition's fold partition: `folds[f]` lists the rows of fold `f`.
/// For binary treatments, partitions leaving any fold without both arms
/// are re-drawn (bounded), since such folds make the fold-level residuals
/// degenerate.
fn rep_partition(data: &Dataset, k: usize, seed: u64, rep: usize) -> Result<Vec<Vec<usize>>> {
    let n = data.n();
    let binary = data.is_binary_treatment();
    for attempt in 0..20u64 {
        let plan = make_split_plan(n, k, 1, derive_seed(seed, &[0xD14A, rep as u64, attempt]))?;
        let folds: Vec<Vec<usize>> = (0..k).map(|f| plan.fold_rows(0, f)).collect();
        if !binary {
            return Ok(folds);
        }
        let ok = folds.iter().all(|rows| {
            let treated: usize = rows.iter().filter(|&&i| data.d[i] == 1.0).count();
            treated > 0 && treated < rows.len()
        });
        if ok {
            return Ok(folds);
        }
    }
    Err(Error::Estimation(format!(
        "repetition {rep}: no fold plan with both treatment arms in every fold after 20 attempts"
    )))
}

/// Cross-fitted out-of-fold predictions of `target` from `features`:
/// for each fold, a learner is trained on the complement and evaluated on
/// the fold's rows. Every row is predicted exactly once, by a model that
/// never saw it.
fn crossfit_predictions(
    features: &Array2<f64>,
    target: &[f64],
    folds: &[Vec<usize>],
    spec: &LearnerSpec,
    cell_seeds: &[u64],
    context: &str,
) -> Result<Vec<f64>> {
    let n = features.nrows();
    let mut out = vec![f64::NAN; n];
    for (f, fold_rows) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        if fold_rows.len() < 2 || train.len() < 2 {
            return Err(Error::Estimation(format!(
                "{context}: fold {f} leaves too few rows to fit or evaluate"
            )));
        }
        let mut x_tr = Array2::zeros((train.len(), features.ncols()));
        for (r, &i) in train.iter().enumerate() {
            x_tr.row_mut(r).assign(&features.row(i));
        }
        let y_tr: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let mut cell_spec = spec.clone();
        cell_spec.seed = cell_seeds[f];
        let model = fit_learner(&cell_spec, &x_tr, &y_tr, None)
            .map_err(|e| Error::Estimation(format!("{context}, fold {f}: {e}")))?;
        for &i in fold_rows {
            out[i] = model.predict_row(features.row(i).as_slice().unwrap());
        }
    }
    debug_assert!(
        out.iter().all(|v| v.is_finite()),
        "some rows were never assigned to a fold"
    );
    Ok(out)
}

fn check_common_preconditions(data: &Dataset, config: &DmlConfig) -> Result<()> {
    config.validate()?;
    if data.n() < 4 * config.k_folds {
        return Err(Error::Data(format!(
            "need at least {} rows for {} folds, got {}",
            4 * config.k_folds,
            config.k_folds,
            data.n()
        )));
    }
    Ok(())
}

/// Per-repetition learner seeds: one stream per (repetition, fold) cell,
/// shared by every nuisance in that cell so that structurally identical
/// nuisance problems (e.g. instrument equal to treatment) produce
/// identical fits.
fn cell_seeds(config_seed: u64, rep: usize, k: usize) -> Vec<u64> {
    (0..k)
        .map(|f| derive_seed(config_seed, &[0xFE17, rep as u64, f as u64]))
        .collect()
}

/// Average treatment effect in the partially linear model.
///
/// For each repetition: residualize the outcome and the treatment on the
/// covariates by cross-fitting, pool residuals across folds, and regress
/// residual on residual. Repetitions are aggregated per the config.
pub fn dml_plm(data: &Dataset, config: &DmlConfig) -> Result<EstimateSummary> {
    check_common_preconditions(data, config)?;
    let y: Vec<f64> = data.y.to_vec();
    let d: Vec<f64> = data.d.to_vec();

    let per_split: Result<Vec<(f64, f64)>> = (0..config.s_repetitions)
        .into_par_iter()
        .map(|rep| {
            let folds = rep_partition(data, config.k_folds, config.seed, rep)?;
            let seeds = cell_seeds(config.seed, rep, config.k_folds);
            let ctx_g = format!("repetition {rep}, outcome nuisance");
            let ctx_m = format!("repetition {rep}, treatment nuisance");
            let g_hat =
                crossfit_predictions(&data.x, &y, &folds, &config.learner_g, &seeds, &ctx_g)?;
            let m_hat =
                crossfit_predictions(&data.x, &d, &folds, &config.learner_m, &seeds, &ctx_m)?;
            let w_res: Vec<f64> = y.iter().zip(&g_hat).map(|(a, b)| a - b).collect();
            let v_res: Vec<f64> = d.iter().zip(&m_hat).map(|(a, b)| a - b).collect();
            residual_regression(&v_res, &w_res)
                .map_err(|e| Error::Estimation(format!("repetition {rep}: {e}")))
        })
        .collect();

    Ok(EstimateSummary::from_splits(
        format!(
            "dml_plm(g={}, m={})",
            config.learner_g.method, config.learner_m.method
        ),
        data.n(),
        per_split?,
        config.aggregation,
        config.nominal_level,
    ))
}

/// Average treatment effect in the partially linear model with an
/// endogenous treatment and excluded instruments.
///
/// Residuals: outcome and treatment on covariates as in [`dml_plm`], plus
/// the instrument on covariates. With several instrument columns a single
/// combined instrument is first formed per fold as the out-of-fold
/// prediction of the treatment from (instruments, covariates); the model
/// behind it and the instrument-on-covariates model are both trained on
/// the fold complement, so no row's residual touches its own data.
pub fn dml_pliv(data: &Dataset, config: &DmlConfig) -> Result<EstimateSummary> {
    check_common_preconditions(data, config)?;
    let instruments = data.instruments.as_ref().ok_or_else(|| {
        Error::Data("instrumented estimation requires instrument columns".into())
    })?;
    let q = instruments.ncols();
    if q == 0 {
        return Err(Error::Data("instrument matrix has no columns".into()));
    }
    let y: Vec<f64> = data.y.to_vec();
    let d: Vec<f64> = data.d.to_vec();
    let n = data.n();
    let learner_r = config
        .learner_r
        .clone()
        .unwrap_or_else(|| config.learner_m.clone());

    // For multi-instrument runs, the combined-instrument learner sees
    // [instruments | covariates].
    let zx = if q > 1 {
        let mut m = Array2::zeros((n, q + data.p()));
        m.slice_mut(ndarray::s![.., ..q]).assign(instruments);
        m.slice_mut(ndarray::s![.., q..]).assign(&data.x);
        Some(m)
    } else {
        None
    };

    let per_split: Result<Vec<(f64, f64)>> = (0..config.s_repetitions)
        .into_par_iter()
        .map(|rep| {
            let folds = rep_partition(data, config.k_folds, config.seed, rep)?;
            let seeds = cell_seeds(config.seed, rep, config.k_folds);
            let ctx_g = format!("repetition {rep}, outcome nuisance");
            let ctx_m = format!("repetition {rep}, treatment nuisance");
            let g_hat =
                crossfit_predictions(&data.x, &y, &folds, &config.learner_g, &seeds, &ctx_g)?;
            let m_hat =
                crossfit_predictions(&data.x, &d, &folds, &config.learner_m, &seeds, &ctx_m)?;

            let z_res =
                instrument_residuals(data, zx.as_ref(), &folds, &learner_r, &seeds, rep)?;
            let w_res: Vec<f64> = y.iter().zip(&g_hat).map(|(a, b)| a - b).collect();
            let v_res: Vec<f64> = d.iter().zip(&m_hat).map(|(a, b)| a - b).collect();
            iv_residual_regression(&z_res, &v_res, &w_res)
                .map_err(|e| Error::Estimation(format!("repetition {rep}: {e}")))
        })
        .collect();

    Ok(EstimateSummary::from_splits(
        format!(
            "dml_pliv(g={}, m={}, r={})",
            config.learner_g.method, config.learner_m.method, learner_r.method
        ),
        data.n(),
        per_split?,
        config.aggregation,
        config.nominal_level,
    ))
}

/// Residualized working instrument, one value per row.
///
/// With a single instrument column the out-of-fold covariate projection is
/// subtracted from the observed column. With several columns, each fold's
/// residual comes from two models fit exclusively on the fold's complement:
/// a combined-instrument model (treatment on instruments and covariates)
/// and the covariate projection of that model's own in-sample values. The
/// fold's rows never enter either fit.
fn instrument_residuals(
    data: &Dataset,
    zx: Option<&Array2<f64>>,
    folds: &[Vec<usize>],
    spec: &LearnerSpec,
    cell_seeds: &[u64],
    rep: usize,
) -> Result<Vec<f64>> {
    let instruments = data
        .instruments
        .as_ref()
        .expect("caller checked instruments");
    let Some(zx) = zx else {
        let z: Vec<f64> = instruments.column(0).to_vec();
        let ctx = format!("repetition {rep}, instrument nuisance");
        let r_hat = crossfit_predictions(&data.x, &z, folds, spec, cell_seeds, &ctx)?;
        return Ok(z.iter().zip(&r_hat).map(|(a, b)| a - b).collect());
    };

    let n = data.n();
    let d: Vec<f64> = data.d.to_vec();
    let take = |m: &Array2<f64>, rows: &[usize]| {
        let mut out = Array2::zeros((rows.len(), m.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).assign(&m.row(i));
        }
        out
    };
    let mut out = vec![f64::NAN; n];
    for (f, fold_rows) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        if fold_rows.len() < 2 || train.len() < 2 {
            return Err(Error::Estimation(format!(
                "repetition {rep}, combined instrument: fold {f} leaves too few rows"
            )));
        }
        let zx_tr = take(zx, &train);
        let x_tr = take(&data.x, &train);
        let d_tr: Vec<f64> = train.iter().map(|&i| d[i]).collect();
        let mut cell_spec = spec.clone();
        cell_spec.seed = cell_seeds[f];
        let f_hat = fit_learner(&cell_spec, &zx_tr, &d_tr, None).map_err(|e| {
            Error::Estimation(format!(
                "repetition {rep}, combined instrument, fold {f}: {e}"
            ))
        })?;
        let z_tilde_tr: Vec<f64> = (0..train.len())
            .map(|r| f_hat.predict_row(zx_tr.row(r).as_slice().unwrap()))
            .collect();
        let r_hat = fit_learner(&cell_spec, &x_tr, &z_tilde_tr, None).map_err(|e| {
            Error::Estimation(format!(
                "repetition {rep}, instrument projection, fold {f}: {e}"
            ))
        })?;
        for &i in fold_rows {
            let z_tilde = f_hat.predict_row(zx.row(i).as_slice().unwrap());
            out[i] = z_tilde - r_hat.predict_row(data.x.row(i).as_slice().unwrap());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dgp;
    use crate::learners::{weighted_ols, LearnerMethod, VarianceMode};
    use approx::assert_relative_eq;
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn lasso_spec(seed: u64) -> LearnerSpec {
        LearnerSpec::new(LearnerMethod::Lasso, seed)
    }

    fn quick_config(seed: u64) -> DmlConfig {
        let mut cfg = DmlConfig::new(lasso_spec(1), lasso_spec(2), seed);
        cfg.s_repetitions = 2;
        cfg
    }

    #[test]
    fn self_regression_gives_unit_coefficient() {
        let v = vec![0.4, -1.2, 2.2, 0.7];
        let (theta, se) = residual_regression(&v, &v).unwrap();
        assert_relative_eq!(theta, 1.0, epsilon = 1e-14);
        assert_relative_eq!(se, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn proportional_vectors_give_the_ratio() {
        let v = vec![1.0, -1.0, 2.0];
        let w = vec![2.0, -2.0, 4.0];
        let (theta, _) = residual_regression(&v, &w).unwrap();
        assert_eq!(theta, 2.0);
    }

    #[test]
    fn zero_outcome_residual_gives_zero_theta_and_p_one() {
        let v = vec![1.0, -1.0, 0.5, 2.0];
        let w = vec![0.0; 4];
        let (theta, se) = residual_regression(&v, &w).unwrap();
        assert_eq!(theta, 0.0);
        assert_eq!(se, 0.0);
        let s = EstimateSummary::from_point("t".into(), 4, theta, se, 0.95, vec![]);
        assert_eq!(s.p_value, 1.0);
    }

    #[test]
    fn absorbed_treatment_is_reported() {
        let v = vec![0.0; 5];
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let err = residual_regression(&v, &w).unwrap_err();
        assert!(
            err.to_string().contains("treatment fully explained"),
            "{err}"
        );
    }

    /// The robust standard error matches the weighted-least-squares module
    /// on the same no-intercept regression.
    #[test]
    fn se_matches_wols_hc_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 60;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = v
            .iter()
            .map(|vi| 0.7 * vi + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (theta, se) = residual_regression(&v, &w).unwrap();
        let x = Array2::from_shape_vec((n, 1), v.clone()).unwrap();
        let fit = weighted_ols(&x, &w, None, None, VarianceMode::HcRobust, None).unwrap();
        assert_relative_eq!(theta, fit.coefficients[0], epsilon = 1e-12);
        assert_relative_eq!(se, fit.se(0), epsilon = 1e-12);
    }

    #[test]
    fn iv_regression_with_instrument_equal_to_regressor_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = v
            .iter()
            .map(|vi| 1.3 * vi + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = residual_regression(&v, &w).unwrap();
        let b = iv_residual_regression(&v, &v, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_instrument_is_rejected_as_weak() {
        // Exactly orthogonal by construction.
        let z = vec![1.0, 1.0, -1.0, -1.0];
        let v = vec![1.0, -1.0, 1.0, -1.0];
        let w = vec![0.5, 0.5, 0.5, 0.5];
        let err = iv_residual_regression(&z, &v, &w).unwrap_err();
        assert!(err.to_string().contains("weak residual instrument"), "{err}");
    }

    #[test]
    fn aggregation_fixtures() {
        // Single split: identity.
        let single = vec![(0.42, 0.07)];
        assert_eq!(aggregate_splits(&single, Aggregation::Median), (0.42, 0.07));
        // Median of three thetas.
        let thetas = vec![(0.1, 0.05), (0.3, 0.05), (0.2, 0.05)];
        let (theta, se) = aggregate_splits(&thetas, Aggregation::Median);
        assert_eq!(theta, 0.2);
        // Hand-computed inflation: median{0.1118, 0.1118, 0.05} = 0.1118.
        assert!((se - 0.1118).abs() < 5e-5, "se {se}");
        // Mean mode.
        let (tm, _) = aggregate_splits(&thetas, Aggregation::Mean);
        assert_relative_eq!(tm, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn aggregation_bounds_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let m = rng.random_range(1..12);
            let per: Vec<(f64, f64)> = (0..m)
                .map(|_| {
                    (
                        rng.sample::<f64, _>(StandardNormal),
                        0.01 + rng.random::<f64>(),
                    )
                })
                .collect();
            for mode in [Aggregation::Median, Aggregation::Mean] {
                let (theta, se) = aggregate_splits(&per, mode);
                let lo = per.iter().map(|(t, _)| *t).fold(f64::INFINITY, f64::min);
                let hi = per.iter().map(|(t, _)| *t).fold(f64::NEG_INFINITY, f64::max);
                assert!(theta >= lo - 1e-12 && theta <= hi + 1e-12);
                let min_se = per.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
                assert!(se >= min_se - 1e-12, "se {se} under min {min_se}");
            }
        }
    }

    #[test]
    fn plm_is_deterministic_and_recovers_a_simple_effect() {
        let sample = generate_dgp("plm_nonlinear", 400, 4, &no_params(), 71).unwrap();
        // Flexible nuisances: the outcome and treatment equations here are
        // nonlinear, so a linear learner would leave a misspecification
        // floor in the estimate.
        let forest = LearnerSpec::new(LearnerMethod::Forest, 0)
            .with("n_trees", 200.0)
            .with("mtry", 4.0)
            .with("min_leaf", 5.0);
        let mut cfg = DmlConfig::new(forest.clone(), forest, 5);
        cfg.s_repetitions = 2;
        let a = dml_plm(&sample.dataset, &cfg).unwrap();
        let b = dml_plm(&sample.dataset, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_split.len(), 2);
        assert_eq!(a.n, 400);
        assert!(a.ci_low <= a.theta && a.theta <= a.ci_high);
        // About three standard errors at this sample size.
        assert!(
            (a.theta - sample.true_ate).abs() < 0.25,
            "theta {} vs truth {}",
            a.theta,
            sample.true_ate
        );
    }

    #[test]
    fn outcome_shift_leaves_theta_unchanged() {
        let sample = generate_dgp("plm_nonlinear", 160, 3, &no_params(), 13).unwrap();
        let cfg = quick_config(9);
        let base = dml_plm(&sample.dataset, &cfg).unwrap();
        let mut shifted = sample.dataset.clone();
        shifted.y = &shifted.y + 5.0;
        let moved = dml_plm(&shifted, &cfg).unwrap();
        assert_relative_eq!(base.theta, moved.theta, epsilon = 1e-8);
    }

    #[test]
    fn treatment_scaling_divides_theta() {
        let sample = generate_dgp("plm_nonlinear", 160, 3, &no_params(), 17).unwrap();
        let cfg = quick_config(21);
        let base = dml_plm(&sample.dataset, &cfg).unwrap();
        let mut scaled = sample.dataset.clone();
        scaled.d = &scaled.d * 2.0;
        let doubled = dml_plm(&scaled, &cfg).unwrap();
        assert_relative_eq!(doubled.theta, base.theta / 2.0, epsilon = 1e-6);
    }

    /// With the instrument equal to the treatment, the instrumented
    /// estimator reduces to the plain one exactly: same split plans, same
    /// seeds, identical nuisance problems.
    #[test]
    fn exogenous_instrument_reduces_to_plm() {
        let sample = generate_dgp("plm_nonlinear", 140, 3, &no_params(), 29).unwrap();
        let mut data = sample.dataset.clone();
        let d_col = Array2::from_shape_vec((data.n(), 1), data.d.to_vec()).unwrap();
        data.instruments = Some(d_col);
        let cfg = quick_config(33);
        let plm = dml_plm(&data, &cfg).unwrap();
        let pliv = dml_pliv(&data, &cfg).unwrap();
        assert_relative_eq!(plm.theta, pliv.theta, epsilon = 1e-10);
        assert_relative_eq!(plm.se, pliv.se, epsilon = 1e-10);
    }

    #[test]
    fn constant_instrument_is_weak() {
        let sample = generate_dgp("plm_nonlinear", 80, 3, &no_params(), 3).unwrap();
        let mut data = sample.dataset.clone();
        data.instruments = Some(Array2::ones((data.n(), 1)));
        let cfg = quick_config(2);
        let err = dml_pliv(&data, &cfg).unwrap_err();
        assert!(err.to_string().contains("weak residual instrument"), "{err}");
    }

    #[test]
    fn pliv_runs_with_two_instruments() {
        let mut params = BTreeMap::new();
        params.insert("n_instruments".to_string(), 2.0);
        let sample = generate_dgp("pliv_endogenous", 260, 3, &params, 41).unwrap();
        let cfg = quick_config(11);
        let fit = dml_pliv(&sample.dataset, &cfg).unwrap();
        assert!(fit.theta.is_finite());
        assert!(fit.se > 0.0);
        assert!(
            (fit.theta - 1.0).abs() < 0.6,
            "two-instrument estimate {} far from 1",
            fit.theta
        );
    }

    #[test]
    fn degenerate_binary_folds_error_after_redraws() {
        // One treated row among 12: any 3-fold partition leaves at least
        // one fold without treated units.
        let n = 12;
        let mut d = vec![0.0; n];
        d[4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample(StandardNormal));
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let data = Dataset::new(
            Array1::from_vec(y),
            Array1::from_vec(d),
            x,
            None,
            None,
            None,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut cfg = quick_config(3);
        cfg.k_folds = 3;
        cfg.s_repetitions = 1;
        let err = dml_plm(&data, &cfg).unwrap_err();
        assert!(err.to_string().contains("both treatment arms"), "{err}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = quick_config(1);
        cfg.k_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_config(1);
        cfg.s_repetitions = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_config(1);
        cfg.nominal_level = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_sample_is_rejected() {
        let sample = generate_dgp("plm_nonlinear", 6, 2, &no_params(), 1).unwrap();
        let err = dml_plm(&sample.dataset, &quick_config(1)).unwrap_err();
        assert!(err.to_string().contains("at least"), "{err}");
    }
}
