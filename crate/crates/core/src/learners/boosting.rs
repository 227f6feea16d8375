//! Gradient boosting for squared error: shallow regression trees fit to
//! residuals, each stage scaled by an exact line-search step times a small
//! shrinkage factor, with subsample bagging and holdout-based depth choice.

use super::tree::{grow_reg_tree, GrowOptions, RegTree};
use crate::error::{Error, Result};
use crate::stats::derive_seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostModel {
    pub intercept: f64,
    pub stages: Vec<BoostStage>,
    pub depth: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostStage {
    pub tree: RegTree,
    /// Combined step: line-search coefficient times shrinkage.
    pub step: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoostOptions {
    pub n_stages: usize,
    pub shrinkage: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    /// Depths tried by the holdout selection.
    pub depths: (usize, usize),
    pub seed: u64,
}

impl BoostOptions {
    pub fn defaults(seed: u64) -> Self {
        BoostOptions {
            n_stages: 300,
            shrinkage: 0.01,
            subsample: 0.5,
            min_leaf: 5,
            depths: (1, 4),
            seed,
        }
    }
}

impl BoostModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut f = self.intercept;
        for stage in &self.stages {
            f += stage.step * stage.tree.predict_row(row);
        }
        f
    }
}

/// Fits boosting at a fixed depth on the given rows. Each stage:
/// 1. subsample rows without replacement,
/// 2. fit a depth-limited tree to current residuals,
/// 3. compute the exact least-squares step `nu* = sum(w r t) / sum(w t^2)`
///    over ALL training rows (not just the subsample),
/// 4. update with `shrinkage * nu*`.
///
/// Because the quadratic loss along the step direction is minimized at
/// `nu*`, any multiplier in (0, 2) strictly reduces training error whenever
/// the tree is correlated with the residual; training MSE is monotone
/// non-increasing by construction.
fn fit_boost_fixed_depth(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    rows: &[usize],
    depth: usize,
    opts: &BoostOptions,
) -> BoostModel {
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (mut wsum, mut s) = (0.0, 0.0);
    for &i in rows {
        wsum += wt(i);
        s += wt(i) * y[i];
    }
    let intercept = s / wsum;

    let mut fhat = vec![intercept; x.nrows()];
    let mut residual = vec![0.0; x.nrows()];
    let grow = GrowOptions {
        mtry: usize::MAX,
        min_leaf: opts.min_leaf,
        min_split: 2 * opts.min_leaf,
        max_depth: depth,
    };
    let m_sub = ((rows.len() as f64) * opts.subsample).round().max(2.0) as usize;
    let m_sub = m_sub.min(rows.len());
    let mut stages = Vec::with_capacity(opts.n_stages);
    let mut pool = rows.to_vec();
    for stage_idx in 0..opts.n_stages {
        for &i in rows {
            residual[i] = y[i] - fhat[i];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            opts.seed,
            &[0xB005, depth as u64, stage_idx as u64],
        ));
        pool.shuffle(&mut rng);
        let sub = &pool[..m_sub];
        let tree = grow_reg_tree(x, &residual, weights, sub, &grow, &mut rng);
        // Exact line search on the full training set.
        let (mut num, mut den) = (0.0, 0.0);
        let mut tvals = vec![0.0; x.nrows()];
        for &i in rows {
            let t = tree.predict_row(x.row(i).as_slice().unwrap());
            tvals[i] = t;
            num += wt(i) * residual[i] * t;
            den += wt(i) * t * t;
        }
        if den <= 1e-300 {
            continue; // degenerate stage (constant-zero tree): skip
        }
        let step = opts.shrinkage * num / den;
        for &i in rows {
            fhat[i] += step * tvals[i];
        }
        stages.push(BoostStage { tree, step });
    }
    BoostModel {
        intercept,
        stages,
        depth,
    }
}

/// Fits gradient boosting, choosing the tree depth on a 20% holdout and
/// then refitting at the chosen depth on all rows.
pub fn fit_boosting(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &BoostOptions,
) -> Result<BoostModel> {
    let n = x.nrows();
    if n < 10 {
        return Err(Error::Data(format!(
            "boosting requires at least 10 rows, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xB0CE]));
    order.shuffle(&mut rng);
    let n_hold = (n / 5).max(2);
    let holdout = &order[..n_hold];
    let train = &order[n_hold..];

    let (d_lo, d_hi) = opts.depths;
    let mut best: Option<(usize, f64)> = None;
    for depth in d_lo..=d_hi {
        let model = fit_boost_fixed_depth(x, y, weights, train, depth, opts);
        let mut err = 0.0;
        let mut wsum = 0.0;
        for &i in holdout {
            let w = weights.map_or(1.0, |w| w[i]);
            let e = y[i] - model.predict_row(x.row(i).as_slice().unwrap());
            err += w * e * e;
            wsum += w;
        }
        let mse = err / wsum;
        if best.is_none_or(|(_, b)| mse < b) {
            best = Some((depth, mse));
        }
    }
    let depth = best.unwrap().0;
    let all: Vec<usize> = (0..n).collect();
    Ok(fit_boost_fixed_depth(x, y, weights, &all, depth, opts))
}
