//! L1-penalized least squares fit by cyclic coordinate descent over a
//! log-spaced penalty path, with K-fold cross-validated penalty selection.
//!
//! Covariates are standardized internally (centered, scaled to mean square
//! one) and the intercept is left unpenalized by centering the outcome;
//! reported coefficients are mapped back to the original scale.

use crate::dataset::make_split_plan;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A fitted lasso regression on the original covariate scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    /// Per-column slopes on the original scale (zeros kept).
    pub coefficients: Vec<f64>,
    /// Penalty chosen by cross-validation (standardized scale).
    pub lambda: f64,
}

impl LassoModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut fit = self.intercept;
        for (j, &b) in self.coefficients.iter().enumerate() {
            if b != 0.0 {
                fit += b * row[j];
            }
        }
        fit
    }
}

///// Weighted column statistics for the standardized working problem:
/// weighted mean and weighted root mean square deviation.
struct WorkingScale {
    x_centers: Vec<f64>,
    x_scales: Vec<f64>,
    y_center: f64,
    active: Vec<bool>,
}

fn working_scale(x: &Array2<f64>, y: &[f64], w: &[f64]) -> WorkingScale {
    let (n, p) = x.dim();
    let wsum: f64 = w.iter().sum();
    let mut x_centers = vec![0.0; p];
    let mut x_scales = vec![1.0; p];
    let mut active = vec![true; p];
    for j in 0..p {
        let mut m = 0.0;
        for i in 0..n {
            m += w[i] * x[[i, j]];
        }
        m /= wsum;
        let mut v = 0.0;
        for i in 0..n {
            let c = x[[i, j]] - m;
            v += w[i] * c * c;
        }
        v /= wsum;
        x_centers[j] = m;
        if v > 0.0 {
            x_scales[j] = v.sqrt();
        } else {
            active[j] = false;
        }
    }
    let y_center = y.iter().zip(w).map(|(yi, wi)| yi * wi).sum::<f64>() / wsum;
    WorkingScale {
        x_centers,
        x_scales,
        y_center,
        active,
    }
}

/// Coordinate descent at a single penalty on pre-standardized data, warm
/// starting from `beta`. `xt` holds standardized columns contiguously.
fn descend(
    xt: &[Vec<f64>],
    r: &mut [f64],
    w: &[f64],
    wsum: f64,
    beta: &mut [f64],
    active: &[bool],
    lambda: f64,
) {
    let p = beta.len();
    let tol = 1e-11;
    for _ in 0..10_000 {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if !active[j] {
                continue;
            }
            let xj = &xt[j];
            let mut grad = 0.0;
            for i in 0..r.len() {
                grad += w[i] * xj[i] * r[i];
            }
            grad /= wsum;
            let z = grad + beta[j];
            let new = soft_threshold(z, lambda);
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..r.len() {
                    r[i] -= delta * xj[i];
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
}

pub(crate) fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Standardizes columns and returns them as contiguous vectors along with
/// the centered outcome.
fn standardized_columns(
    x: &Array2<f64>,
    y: &[f64],
    scale: &WorkingScale,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, p) = x.dim();
    let mut xt = Vec::with_capacity(p);
    for j in 0..p {
        let mut col = Vec::with_capacity(n);
        for i in 0..n {
            col.push((x[[i, j]] - scale.x_centers[j]) / scale.x_scales[j]);
        }
        xt.push(col);
    }
    let yc: Vec<f64> = y.iter().map(|v| v - scale.y_center).collect();
    (xt, yc)
}

fn lambda_max(xt: &[Vec<f64>], yc: &[f64], w: &[f64], wsum: f64, active: &[bool]) -> f64 {
    let mut lmax = 0.0f64;
    for (j, col) in xt.iter().enumerate() {
        if !active[j] {
            continue;
        }
        let mut g = 0.0;
        for i in 0..yc.len() {
            g += w[i] * col[i] * yc[i];
        }
        lmax = lmax.max((g / wsum).abs());
    }
    lmax
}

fn lambda_grid(lmax: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    if lmax <= 0.0 {
        return vec![0.0];
    }
    let n = n_lambda.max(2);
    (0..n)
        .map(|i| lmax * min_ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Fits the full path on one sample and returns the per-lambda standardized
/// coefficient vectors.
fn path_fit(
    xt: &[Vec<f64>],
    yc: &[f64],
    w: &[f64],
    wsum: f64,
    active: &[bool],
    grid: &[f64],
) -> Vec<Vec<f64>> {
    let p = xt.len();
    let mut beta = vec![0.0; p];
    let mut r = yc.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        descend(xt, &mut r, w, wsum, &mut beta, active, lambda);
        out.push(beta.clone());
    }
    out
}

pub(crate) struct LassoConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Fixed penalty; skips cross-validation when set.
    pub fixed_lambda: Option<f64>,
    pub cv_folds: usize,
    pub seed: u64,
}

/// Fits a lasso regression with cross-validated penalty selection.
pub(crate) fn fit_lasso(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    cfg: &LassoConfig,
) -> Result<LassoModel> {
    let (n, p) = x.dim();
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    let scale = working_scale(x, y, &w);
    let (xt, yc) = standardized_columns(x, y, &scale);
    let lmax = lambda_max(&xt, &yc, &w, wsum, &scale.active);

    let chosen_lambda = if let Some(l) = cfg.fixed_lambda {
        l
    } else if lmax == 0.0 {
        0.0
    } else {
        let grid = lambda_grid(lmax, cfg.n_lambda, cfg.lambda_min_ratio);
        let folds = cfg.cv_folds.min(n);
        if folds < 2 {
            return Err(Error::Config(
                "lasso: cross-validation requires at least 2 folds".into(),
            ));
        }
        let plan = make_split_plan(n, folds, 1, cfg.seed)?;
        let mut cv_err = vec![0.0f64; grid.len()];
        for fold in 0..folds {
            let train = plan.complement_rows(0, fold);
            let valid = plan.fold_rows(0, fold);
            let xtr = subset_matrix(x, &train);
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let wtr: Vec<f64> = train.iter().map(|&i| w[i]).collect();
            let wsum_tr: f64 = wtr.iter().sum();
            let sc = working_scale(&xtr, &ytr, &wtr);
            let (xt_tr, yc_tr) = standardized_columns(&xtr, &ytr, &sc);
            let path = path_fit(&xt_tr, &yc_tr, &wtr, wsum_tr, &sc.active, &grid);
            for (g, beta_std) in path.iter().enumerate() {
                let model = destandardize(beta_std, &sc);
                let mut err = 0.0;
                for &i in &valid {
                    let e = y[i] - model.predict_row(x.row(i).as_slice().unwrap());
                    err += w[i] * e * e;
                }
                cv_err[g] += err;
            }
        }
        // Descending grid: ties prefer the earlier (sparser) entry.
        let mut best = 0;
        for g in 1..grid.len() {
            if cv_err[g] < cv_err[best] {
                best = g;
            }
        }
        grid[best]
    };

    // Final fit on the full sample at the chosen penalty, warm-started along
    // the grid down to that penalty for stability.
    let mut beta = vec![0.0; p];
    let mut r = yc.clone();
    if lmax > 0.0 {
        for &lambda in lambda_grid(lmax, cfg.n_lambda, cfg.lambda_min_ratio)
            .iter()
            .filter(|&&l| l > chosen_lambda)
        {
            descend(&xt, &mut r, &w, wsum, &mut beta, &scale.active, lambda);
        }
    }
    descend(&xt, &mut r, &w, wsum, &mut beta, &scale.active, chosen_lambda);
    let mut model = destandardize(&beta, &scale);
    model.lambda = chosen_lambda;
    Ok(model)
}

fn subset_matrix(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

fn destandardize(beta_std: &[f64], scale: &WorkingScale) -> LassoModel {
    let coefficients: Vec<f64> = beta_std
        .iter()
        .enumerate()
        .map(|(j, b)| b / scale.x_scales[j])
        .collect();
    let intercept = scale.y_center
        - coefficients
            .iter()
            .zip(&scale.x_centers)
            .map(|(b, c)| b * c)
            .sum::<f64>();
    LassoModel {
        intercept,
        coefficients,
        lambda: 0.0,
    }
}
