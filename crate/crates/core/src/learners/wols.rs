//! Weighted least squares with homoskedastic, heteroskedasticity-robust,
//! and cluster-robust covariance estimators.

use crate::error::{Error, Result};
use crate::linalg::{sym_inverse_named, xtwx, xtwy};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Which covariance estimator to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Classical: s^2 (X'WX)^{-1} with s^2 = sum(w e^2) / (n - k).
    Homoskedastic,
    /// Heteroskedasticity-consistent sandwich with the n/(n-k) small-sample
    /// factor.
    HcRobust,
    /// Cluster-robust sandwich over cluster score sums with the
    /// G/(G-1) * (n-1)/(n-k) small-sample factor.
    ClusterRobust,
}

/// A fitted weighted least-squares regression.
#[derive(Debug, Clone)]
pub struct WolsFit {
    /// Coefficient names, parallel to `coefficients`.
    pub names: Vec<String>,
    pub coefficients: Array1<f64>,
    /// Covariance matrix of the coefficients (symmetric PSD).
    pub vcov: Array2<f64>,
    pub n: usize,
    pub variance_mode: VarianceMode,
    /// Non-fatal conditions recorded during the fit.
    pub warnings: Vec<String>,
}

impl WolsFit {
    /// Standard error of coefficient `j`.
    pub fn se(&self, j: usize) -> f64 {
        self.vcov[[j, j]].max(0.0).sqrt()
    }

    /// Coefficient value looked up by name.
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.coefficients[j])
    }
}

/// Fits y on the columns of `x` by weighted least squares.
///
/// `x` must already contain any intercept column. Weights must be strictly
/// positive; `None` means unit weights. `names` labels the columns (defaults
/// to `b1..bk`), and `cluster_id` is required (and only used) for
/// [`VarianceMode::ClusterRobust`].
pub fn weighted_ols(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    names: Option<&[String]>,
    variance_mode: VarianceMode,
    cluster_id: Option<&[i64]>,
) -> Result<WolsFit> {
    let (n, k) = x.dim();
    if y.len() != n {
        return Err(Error::Data(format!(
            "weighted_ols: y has {} rows, x has {n}",
            y.len()
        )));
    }
    if n <= k {
        return Err(Error::Data(format!(
            "weighted_ols: need more rows than columns (n = {n}, k = {k})"
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Data("weighted_ols: weight length mismatch".into()));
        }
        if w.iter().any(|&wi| !wi.is_finite() || wi <= 0.0) {
            return Err(Error::Data(
                "weighted_ols: weights must be strictly positive and finite".into(),
            ));
        }
    }
    let names: Vec<String> = match names {
        Some(s) => {
            assert_eq!(s.len(), k, "one name per column");
            s.to_vec()
        }
        None => (1..=k).map(|j| format!("b{j}")).collect(),
    };

    let bread = sym_inverse_named(&xtwx(x, weights), &names)?;
    let coefficients = bread.dot(&xtwy(x, y, weights));

    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let mut fit = 0.0;
            for j in 0..k {
                fit += x[[i, j]] * coefficients[j];
            }
            y[i] - fit
        })
        .collect();
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut warnings = Vec::new();
    let vcov = match variance_mode {
        VarianceMode::Homoskedastic => {
            let s2: f64 =
                residuals.iter().enumerate().map(|(i, e)| wt(i) * e * e).sum::<f64>() / (n - k) as f64;
            &bread * s2
        }
        VarianceMode::HcRobust => {
            // Meat: sum over rows of (w_i e_i)^2 x_i x_i'.
            let mut meat = Array2::<f64>::zeros((k, k));
            for (i, e) in residuals.iter().enumerate() {
                let s = wt(i) * e;
                let row = x.row(i);
                for a in 0..k {
                    let sa = s * row[a];
                    for b in a..k {
                        meat[[a, b]] += sa * s * row[b];
                    }
                }
            }
            mirror(&mut meat);
            let factor = n as f64 / (n - k) as f64;
            bread.dot(&meat).dot(&bread) * factor
        }
        VarianceMode::ClusterRobust => {
            let ids = cluster_id.ok_or_else(|| {
                Error::Config("weighted_ols: cluster-robust variance requires cluster ids".into())
            })?;
            if ids.len() != n {
                return Err(Error::Data("weighted_ols: cluster id length mismatch".into()));
            }
            // Score sum per cluster, then outer products.
            let mut sums: HashMap<i64, Array1<f64>> = HashMap::new();
            for i in 0..n {
                let s = wt(i) * residuals[i];
                let entry = sums.entry(ids[i]).or_insert_with(|| Array1::zeros(k));
                for j in 0..k {
                    entry[j] += s * x[[i, j]];
                }
            }
            let g = sums.len();
            if g < 2 {
                return Err(Error::Estimation(
                    "weighted_ols: cluster-robust variance requires at least 2 clusters".into(),
                ));
            }
            if g < k {
                warnings.push(format!(
                    "cluster-robust variance with fewer clusters ({g}) than coefficients ({k})"
                ));
            }
            let mut meat = Array2::<f64>::zeros((k, k));
            for sg in sums.values() {
                for a in 0..k {
                    for b in a..k {
                        meat[[a, b]] += sg[a] * sg[b];
                    }
                }
            }
            mirror(&mut meat);
            let factor =
                g as f64 / (g - 1) as f64 * (n - 1) as f64 / (n - k) as f64;
            bread.dot(&meat).dot(&bread) * factor
        }
    };
    let mut vcov = vcov;
    mirror_average(&mut vcov);

    Ok(WolsFit {
        names,
        coefficients,
        vcov,
        n,
        variance_mode,
        warnings,
    })
}

fn mirror(m: &mut Array2<f64>) {
    let k = m.nrows();
    for a in 0..k {
        for b in 0..a {
            m[[a, b]] = m[[b, a]];
        }
    }
}

/// Symmetrizes away floating-point asymmetry from the sandwich products.
fn mirror_average(m: &mut Array2<f64>) {
    let k = m.nrows();
    for a in 0..k {
        for b in (a + 1)..k {
            let avg = 0.5 * (m[[a, b]] + m[[b, a]]);
            m[[a, b]] = avg;
            m[[b, a]] = avg;
        }
    }
}
