//! Synthetic data generators with known causal truth.
//!
//! Each generator returns the drawn sample together with the true average
//! effect and the true per-row effect, so Monte Carlo studies can score
//! estimators against an exact oracle.
//!
//! Generators:
//! - `plm_nonlinear`: partially linear model with nonlinear outcome and
//!   treatment equations; the naive plug-in estimator is visibly biased here.
//! - `pliv_endogenous`: adds treatment-outcome error correlation plus a
//!   valid instrument, so only IV-based estimation recovers the effect.
//! - `hte_forest`: binary treatment with known propensity and effect
//!   `tau(x) = max(x1, 0) * scale`.
//! - `hte_null`: binary treatment with a constant effect.

use super::{default_names, Dataset};
use crate::error::{Error, Result};
use crate::stats::normal_cdf;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// A synthetic draw plus its oracle values.
#[derive(Debug, Clone)]
pub struct DgpSample {
    pub dataset: Dataset,
    /// True average treatment effect (equals the mean of `true_cate`).
    pub true_ate: f64,
    /// True per-row treatment effect.
    pub true_cate: Vec<f64>,
    pub name: String,
}

struct ParamReader<'a> {
    params: &'a BTreeMap<String, f64>,
    allowed: &'a [&'a str],
}

impl<'a> ParamReader<'a> {
    fn new(name: &str, params: &'a BTreeMap<String, f64>, allowed: &'a [&'a str]) -> Result<Self> {
        for key in params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter {key:?} for dgp {name}; allowed: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(ParamReader { params, allowed })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&key));
        self.params.get(key).copied().unwrap_or(default)
    }
}

/// Draws a synthetic sample from the named generator.
///
/// Unknown generator names and unknown parameter keys are rejected. The same
/// `(name, n, p, params, seed)` always produces bit-identical output.
pub fn generate_dgp(
    name: &str,
    n: usize,
    p: usize,
    params: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<DgpSample> {
    if n == 0 || p == 0 {
        return Err(Error::Config("dgp requires n >= 1 and p >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "plm_nonlinear" => plm_nonlinear(n, p, params, &mut rng),
        "pliv_endogenous" => pliv_endogenous(n, p, params, &mut rng),
        "hte_forest" => hte(n, p, params, &mut rng, false),
        "hte_null" => hte(n, p, params, &mut rng, true),
        _ => Err(Error::Config(format!(
            "unknown dgp {name:?}; available: plm_nonlinear, pliv_endogenous, hte_forest, hte_null"
        ))),
    }
}

fn draw_x(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((n, p));
    for r in 0..n {
        for c in 0..p {
            x[[r, c]] = rng.sample(StandardNormal);
        }
    }
    x
}

/// Nonlinear outcome baseline: sin(x1) + x2 * x3 (terms present when the
/// corresponding columns exist).
fn g0(x: &Array2<f64>, row: usize) -> f64 {
    let p = x.ncols();
    let mut g = x[[row, 0]].sin();
    if p >= 3 {
        g += x[[row, 1]] * x[[row, 2]];
    }
    g
}

fn plm_nonlinear(
    n: usize,
    p: usize,
    params: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DgpSample> {
    let pr = ParamReader::new("plm_nonlinear", params, &["theta", "sigma_u", "sigma_v"])?;
    let theta = pr.get("theta", 0.5);
    let sigma_u = pr.get("sigma_u", 1.0);
    let sigma_v = pr.get("sigma_v", 0.5);
    if !theta.is_finite() || sigma_u <= 0.0 || sigma_v <= 0.0 {
        return Err(Error::Config("plm_nonlinear: theta must be finite, sigmas positive".into()));
    }
    let x = draw_x(n, p, rng);
    let mut d = Array1::<f64>::zeros(n);
    let mut y = Array1::<f64>::zeros(n);
    for r in 0..n {
        let v: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        d[r] = normal_cdf(x[[r, 0]]) + sigma_v * v;
        y[r] = theta * d[r] + g0(&x, r) + sigma_u * u;
    }
    let dataset = Dataset::new(y, d, x, None, None, None, default_names(p))?;
    Ok(DgpSample {
        dataset,
        true_ate: theta,
        true_cate: vec![theta; n],
        name: "plm_nonlinear".into(),
    })
}

fn pliv_endogenous(
    n: usize,
    p: usize,
    params: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DgpSample> {
    let pr = ParamReader::new(
        "pliv_endogenous",
        params,
        &["theta", "rho", "instrument_strength", "sigma_u", "sigma_v", "n_instruments"],
    )?;
    let theta = pr.get("theta", 1.0);
    let rho = pr.get("rho", 0.5);
    let gamma = pr.get("instrument_strength", 1.0);
    let sigma_u = pr.get("sigma_u", 1.0);
    let sigma_v = pr.get("sigma_v", 1.0);
    let n_inst = pr.get("n_instruments", 1.0);
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Config("pliv_endogenous: rho must lie in [-1, 1]".into()));
    }
    if !(n_inst == 1.0 || n_inst == 2.0) {
        return Err(Error::Config("pliv_endogenous: n_instruments must be 1 or 2".into()));
    }
    if !theta.is_finite() || sigma_u <= 0.0 || sigma_v <= 0.0 || !gamma.is_finite() {
        return Err(Error::Config("pliv_endogenous: invalid parameter values".into()));
    }
    let n_inst = n_inst as usize;
    let x = draw_x(n, p, rng);
    let mut z = Array2::<f64>::zeros((n, n_inst));
    let mut d = Array1::<f64>::zeros(n);
    let mut y = Array1::<f64>::zeros(n);
    for r in 0..n {
        for c in 0..n_inst {
            z[[r, c]] = rng.sample(StandardNormal);
        }
        let v0: f64 = rng.sample(StandardNormal);
        let w: f64 = rng.sample(StandardNormal);
        // corr(u, v) = rho by construction.
        let u = sigma_u * (rho * v0 + (1.0 - rho * rho).sqrt() * w);
        let mut instrument_part = gamma * z[[r, 0]];
        if n_inst == 2 {
            instrument_part += 0.5 * gamma * z[[r, 1]];
        }
        d[r] = normal_cdf(x[[r, 0]]) + instrument_part + sigma_v * v0;
        y[r] = theta * d[r] + g0(&x, r) + u;
    }
    let dataset = Dataset::new(y, d, x, Some(z), None, None, default_names(p))?;
    Ok(DgpSample {
        dataset,
        true_ate: theta,
        true_cate: vec![theta; n],
        name: "pliv_endogenous".into(),
    })
}

/// Shared generator for the heterogeneous- and constant-effect designs with
/// binary treatment and known constant propensity.
fn hte(
    n: usize,
    p: usize,
    params: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
    null: bool,
) -> Result<DgpSample> {
    let (name, allowed): (&str, &[&str]) = if null {
        ("hte_null", &["tau", "propensity", "sigma"])
    } else {
        ("hte_forest", &["scale", "propensity", "sigma"])
    };
    let pr = ParamReader::new(name, params, allowed)?;
    let propensity = pr.get("propensity", 0.5);
    let sigma = pr.get("sigma", 1.0);
    if !(propensity > 0.0 && propensity < 1.0) {
        return Err(Error::Config(format!("{name}: propensity must lie strictly in (0, 1)")));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("{name}: sigma must be positive")));
    }
    let x = draw_x(n, p, rng);
    let mut d = Array1::<f64>::zeros(n);
    let mut y = Array1::<f64>::zeros(n);
    let mut cate = vec![0.0; n];
    for r in 0..n {
        let tau = if null {
            pr.get("tau", 0.0)
        } else {
            x[[r, 0]].max(0.0) * pr.get("scale", 1.0)
        };
        cate[r] = tau;
        d[r] = f64::from(rng.random::<f64>() < propensity);
        // Baseline avoids x1 so effect heterogeneity is the only x1 signal.
        let mut baseline = 0.0;
        if p >= 2 {
            baseline += 0.5 * x[[r, 1]];
        }
        if p >= 3 {
            baseline += 0.5 * x[[r, 2]];
        }
        let eps: f64 = rng.sample(StandardNormal);
        y[r] = baseline + tau * d[r] + sigma * eps;
    }
    // For the constant-effect design the truth is the parameter itself;
    // averaging would only add floating-point noise.
    let true_ate = if null {
        pr.get("tau", 0.0)
    } else {
        crate::stats::mean(&cate)
    };
    let dataset = Dataset::new(y, d, x, None, None, None, default_names(p))?;
    Ok(DgpSample {
        dataset,
        true_ate,
        true_cate: cate,
        name: name.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn unknown_name_and_params_rejected() {
        let err = generate_dgp("mystery", 10, 2, &no_params(), 0).unwrap_err();
        assert!(err.to_string().contains("unknown dgp"));
        let mut params = BTreeMap::new();
        params.insert("bogus".to_string(), 1.0);
        let err = generate_dgp("plm_nonlinear", 10, 2, &params, 0).unwrap_err();
        assert!(err.to_string().contains("unknown parameter"));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_dgp("plm_nonlinear", 50, 4, &no_params(), 11).unwrap();
        let b = generate_dgp("plm_nonlinear", 50, 4, &no_params(), 11).unwrap();
        assert_eq!(a.dataset.y, b.dataset.y);
        assert_eq!(a.dataset.d, b.dataset.d);
        assert_eq!(a.dataset.x, b.dataset.x);
        let c = generate_dgp("plm_nonlinear", 50, 4, &no_params(), 12).unwrap();
        assert_ne!(a.dataset.y, c.dataset.y);
    }

    #[test]
    fn theta_parameter_is_echoed_as_truth() {
        let mut params = BTreeMap::new();
        params.insert("theta".to_string(), 2.5);
        let s = generate_dgp("plm_nonlinear", 20, 3, &params, 1).unwrap();
        assert_eq!(s.true_ate, 2.5);
        assert!(s.true_cate.iter().all(|&t| t == 2.5));
    }

    #[test]
    fn cate_mean_equals_ate_exactly() {
        for name in ["plm_nonlinear", "pliv_endogenous", "hte_forest", "hte_null"] {
            let s = generate_dgp(name, 500, 5, &no_params(), 3).unwrap();
            assert_relative_eq!(crate::stats::mean(&s.true_cate), s.true_ate, epsilon = 1e-12);
        }
    }

    #[test]
    fn hte_null_has_constant_effect() {
        let mut params = BTreeMap::new();
        params.insert("tau".to_string(), 0.7);
        let s = generate_dgp("hte_null", 100, 4, &params, 5).unwrap();
        assert!(s.true_cate.iter().all(|&t| t == 0.7));
        assert_eq!(s.true_ate, 0.7);
        assert!(s.dataset.is_binary_treatment());
    }

    #[test]
    fn hte_forest_truth_matches_truncated_normal_expectation() {
        // E[max(Z, 0)] = 1/sqrt(2 pi) = 0.398942... for standard normal Z;
        // sd(max(Z, 0)) = sqrt(1/2 - 1/(2 pi)) = 0.583748...
        let n = 100_000;
        let mut params = BTreeMap::new();
        params.insert("scale".to_string(), 2.0);
        let s = generate_dgp("hte_forest", n, 3, &params, 9).unwrap();
        let expected = 2.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mc_err = 2.0 * 0.5837484 / (n as f64).sqrt();
        let sample_mean = crate::stats::mean(&s.true_cate);
        assert!(
            (sample_mean - expected).abs() < 3.0 * mc_err,
            "mean cate {sample_mean} vs expected {expected} (3 mc-err {})",
            3.0 * mc_err
        );
    }

    #[test]
    fn pliv_instrument_is_relevant_and_valid() {
        let s = generate_dgp("pliv_endogenous", 20_000, 3, &no_params(), 13).unwrap();
        let z = s.dataset.instruments.as_ref().unwrap();
        assert_eq!(z.ncols(), 1);
        let zc: Vec<f64> = z.column(0).to_vec();
        let dc: Vec<f64> = s.dataset.d.to_vec();
        // Structural residual u = y - theta*d - g0(x) must be uncorrelated
        // with z while d is strongly correlated with z.
        let u: Vec<f64> = (0..s.dataset.n())
            .map(|r| s.dataset.y[r] - s.true_ate * s.dataset.d[r] - g0(&s.dataset.x, r))
            .collect();
        assert!(crate::stats::correlation(&zc, &dc).abs() > 0.4);
        assert!(crate::stats::correlation(&zc, &u).abs() < 0.03);
    }

    #[test]
    fn pliv_two_instrument_variant() {
        let mut params = BTreeMap::new();
        params.insert("n_instruments".to_string(), 2.0);
        let s = generate_dgp("pliv_endogenous", 200, 3, &params, 1).unwrap();
        assert_eq!(s.dataset.instruments.as_ref().unwrap().ncols(), 2);
    }

    #[test]
    fn invalid_parameter_values_rejected() {
        let mut params = BTreeMap::new();
        params.insert("rho".to_string(), 1.5);
        assert!(generate_dgp("pliv_endogenous", 10, 2, &params, 0).is_err());
        let mut params = BTreeMap::new();
        params.insert("propensity".to_string(), 0.0);
        assert!(generate_dgp("hte_forest", 10, 2, &params, 0).is_err());
    }
}
