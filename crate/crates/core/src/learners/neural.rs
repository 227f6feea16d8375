//! Single-hidden-layer neural network for regression: logistic hidden
//! units, linear output, L2 weight decay, trained by full-batch gradient
//! descent with backtracking step halving. Inputs are standardized
//! internally; small and deterministic by design.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralModel {
    /// `hidden[h]` holds (bias, weights over standardized inputs).
    pub hidden: Vec<(f64, Vec<f64>)>,
    pub out_bias: f64,
    pub out_weights: Vec<f64>,
    /// Input standardization (mean, scale) per column.
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    /// Output de-standardization.
    pub y_center: f64,
    pub y_scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NeuralOptions {
    pub n_hidden: usize,
    pub decay: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl NeuralOptions {
    pub fn defaults(seed: u64) -> Self {
        NeuralOptions {
            n_hidden: 2,
            decay: 0.01,
            max_iter: 5000,
            seed,
        }
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Parameter vector layout: for each hidden unit h, [bias, w_1..w_p];
/// then output bias; then output weights per hidden unit.
fn n_params(p: usize, h: usize) -> usize {
    h * (p + 1) + 1 + h
}

/// Penalized mean squared error and its gradient, on standardized data.
/// Loss = (1/n) sum_i w_i (yhat_i - y_i)^2 + decay * sum(theta^2 over
/// non-bias weights).
fn loss_grad(
    theta: &[f64],
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    p: usize,
    h: usize,
    decay: f64,
) -> (f64, Vec<f64>) {
    let n = x.len();
    let wsum: f64 = w.iter().sum();
    let ob_at = h * (p + 1);
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    let mut act = vec![0.0; h];
    for i in 0..n {
        for (k, a) in act.iter_mut().enumerate() {
            let base = k * (p + 1);
            let mut v = theta[base];
            for j in 0..p {
                v += theta[base + 1 + j] * x[i][j];
            }
            *a = logistic(v);
        }
        let mut yhat = theta[ob_at];
        for k in 0..h {
            yhat += theta[ob_at + 1 + k] * act[k];
        }
        let e = yhat - y[i];
        loss += w[i] * e * e;
        let g_out = 2.0 * w[i] * e / wsum;
        grad[ob_at] += g_out;
        for k in 0..h {
            grad[ob_at + 1 + k] += g_out * act[k];
            let g_hidden = g_out * theta[ob_at + 1 + k] * act[k] * (1.0 - act[k]);
            let base = k * (p + 1);
            grad[base] += g_hidden;
            for j in 0..p {
                grad[base + 1 + j] += g_hidden * x[i][j];
            }
        }
    }
    loss /= wsum;
    // Weight decay on all non-bias weights (hidden input weights and
    // output weights), not on biases.
    for k in 0..h {
        let base = k * (p + 1);
        for j in 0..p {
            loss += decay * theta[base + 1 + j] * theta[base + 1 + j];
            grad[base + 1 + j] += 2.0 * decay * theta[base + 1 + j];
        }
        loss += decay * theta[ob_at + 1 + k] * theta[ob_at + 1 + k];
        grad[ob_at + 1 + k] += 2.0 * decay * theta[ob_at + 1 + k];
    }
    (loss, grad)
}

/// Fits the network by gradient descent with backtracking: start each
/// iteration from the last accepted step size, halve until the loss
/// decreases, stop when no progress is possible at tiny steps.
pub fn fit_neural(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &NeuralOptions,
) -> Result<NeuralModel> {
    let n = x.nrows();
    let p = x.ncols();
    if n < 5 {
        return Err(Error::Data(format!(
            "neural net requires at least 5 rows, got {n}"
        )));
    }
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();

    // Standardize inputs and output with weighted moments.
    let mut centers = vec![0.0; p];
    let mut scales = vec![1.0; p];
    for j in 0..p {
        let m: f64 = (0..n).map(|i| w[i] * x[[i, j]]).sum::<f64>() / wsum;
        let v: f64 = (0..n)
            .map(|i| w[i] * (x[[i, j]] - m) * (x[[i, j]] - m))
            .sum::<f64>()
            / wsum;
        centers[j] = m;
        scales[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let y_center: f64 = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
    let yv: f64 = (0..n)
        .map(|i| w[i] * (y[i] - y_center) * (y[i] - y_center))
        .sum::<f64>()
        / wsum;
    let y_scale = if yv.sqrt() > 1e-12 { yv.sqrt() } else { 1.0 };

    let xs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..p).map(|j| (x[[i, j]] - centers[j]) / scales[j]).collect())
        .collect();
    let ys: Vec<f64> = y.iter().map(|v| (v - y_center) / y_scale).collect();

    let h = opts.n_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta: Vec<f64> = (0..n_params(p, h))
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();

    let (mut loss, mut grad) = loss_grad(&theta, &xs, &ys, &w, p, h, opts.decay);
    let mut step = 1.0f64;
    for _ in 0..opts.max_iter {
        if !loss.is_finite() {
            return Err(Error::Estimation(
                "neural net training diverged to a non-finite loss".into(),
            ));
        }
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>();
        if gnorm.sqrt() < 1e-10 {
            break;
        }
        // Backtracking from a slightly enlarged previous step.
        step = (step * 2.0).min(10.0);
        let mut accepted = false;
        while step > 1e-14 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - step * g)
                .collect();
            let (cl, cg) = loss_grad(&cand, &xs, &ys, &w, p, h, opts.decay);
            if cl.is_finite() && cl < loss {
                theta = cand;
                loss = cl;
                grad = cg;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // local minimum at numerical precision
        }
    }

    let ob_at = h * (p + 1);
    let hidden: Vec<(f64, Vec<f64>)> = (0..h)
        .map(|k| {
            let base = k * (p + 1);
            (theta[base], theta[base + 1..base + 1 + p].to_vec())
        })
        .collect();
    Ok(NeuralModel {
        hidden,
        out_bias: theta[ob_at],
        out_weights: theta[ob_at + 1..ob_at + 1 + h].to_vec(),
        centers,
        scales,
        y_center,
        y_scale,
    })
}

impl NeuralModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let p = self.centers.len();
        let mut out = self.out_bias;
        for (k, (bias, ws)) in self.hidden.iter().enumerate() {
            let mut v = *bias;
            for j in 0..p {
                v += ws[j] * (row[j] - self.centers[j]) / self.scales[j];
            }
            out += self.out_weights[k] * logistic(v);
        }
        out * self.y_scale + self.y_center
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 20;
        let p = 3;
        let h = 2;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
        let theta: Vec<f64> = (0..n_params(p, h))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let decay = 0.01;
        let (_, grad) = loss_grad(&theta, &xs, &ys, &w, p, h, decay);
        let eps = 1e-6;
        for q in 0..theta.len() {
            let mut up = theta.clone();
            up[q] += eps;
            let mut dn = theta.clone();
            dn[q] -= eps;
            let (lu, _) = loss_grad(&up, &xs, &ys, &w, p, h, decay);
            let (ld, _) = loss_grad(&dn, &xs, &ys, &w, p, h, decay);
            let fd = (lu - ld) / (2.0 * eps);
            assert!(
                (fd - grad[q]).abs() < 1e-4 * (1.0 + fd.abs()),
                "param {q}: analytic {} vs numeric {fd}",
                grad[q]
            );
        }
    }

    #[test]
    fn learns_a_smooth_nonlinear_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 300;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[[i, 0]] = rng.sample(StandardNormal);
            x[[i, 1]] = rng.sample(StandardNormal);
            y[i] = (x[[i, 0]]).tanh() + 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let model = fit_neural(&x, &y, None, &NeuralOptions::defaults(3)).unwrap();
        let mut err = 0.0;
        for k in 0..9 {
            let v = -2.0 + 0.5 * k as f64;
            let pred = model.predict_row(&[v, 0.0]);
            err = f64::max(err, (pred - v.tanh()).abs());
        }
        assert!(err < 0.35, "worst abs error {err}");
    }

    #[test]
    fn training_loss_decreases_from_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 100;
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[[i, 0]] = rng.sample(StandardNormal);
            x[[i, 1]] = rng.sample(StandardNormal);
            y[i] = x[[i, 0]] - x[[i, 1]] + 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let model = fit_neural(&x, &y, None, &NeuralOptions::defaults(5)).unwrap();
        let mse: f64 = (0..n)
            .map(|i| {
                let e = y[i] - model.predict_row(x.row(i).as_slice().unwrap());
                e * e
            })
            .sum::<f64>()
            / n as f64;
        let yvar = crate::stats::variance(&y);
        assert!(mse < 0.6 * yvar, "mse {mse} vs var {yvar}");
    }

    #[test]
    fn determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let n = 50;
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[[i, 0]] = rng.sample(StandardNormal);
            x[[i, 1]] = rng.sample(StandardNormal);
            y[i] = x[[i, 0]] + 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let m1 = fit_neural(&x, &y, None, &NeuralOptions::defaults(8)).unwrap();
        let m2 = fit_neural(&x, &y, None, &NeuralOptions::defaults(8)).unwrap();
        assert_eq!(m1.predict_row(&[0.5, 0.5]), m2.predict_row(&[0.5, 0.5]));
    }
}
