//! Bagged regression forest: bootstrap-sampled greedy trees averaged at
//! prediction time, with out-of-bag prediction support.

use super::tree::{grow_reg_tree, GrowOptions, RegTree};
use crate::stats::derive_seed;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegForest {
    pub trees: Vec<RegTree>,
    /// `inbag[t][i]`: row `i` appeared in tree `t`'s bootstrap sample.
    pub inbag: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RegForestOptions {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl RegForestOptions {
    pub fn defaults(p: usize, seed: u64) -> Self {
        RegForestOptions {
            n_trees: 200,
            mtry: (p / 3).max(1),
            min_leaf: 5,
            seed,
        }
    }
}

/// Fits a bagged forest of regression trees. Each tree draws a bootstrap
/// sample (n rows with replacement) and grows with `mtry` features per node.
pub fn fit_reg_forest(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &RegForestOptions,
) -> RegForest {
    let n = x.nrows();
    let grow = GrowOptions {
        mtry: opts.mtry,
        min_leaf: opts.min_leaf,
        min_split: 2 * opts.min_leaf,
        max_depth: 0,
    };
    let fitted: Vec<(RegTree, Vec<bool>)> = (0..opts.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0x7EE5, t as u64]));
            let mut rows = Vec::with_capacity(n);
            let mut inbag = vec![false; n];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                rows.push(i);
                inbag[i] = true;
            }
            let tree = grow_reg_tree(x, y, weights, &rows, &grow, &mut rng);
            (tree, inbag)
        })
        .collect();
    let mut trees = Vec::with_capacity(opts.n_trees);
    let mut inbag = Vec::with_capacity(opts.n_trees);
    for (t, b) in fitted {
        trees.push(t);
        inbag.push(b);
    }
    RegForest { trees, inbag }
}

impl RegForest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        s / self.trees.len() as f64
    }

    /// Out-of-bag prediction for training row `i`: the average over trees
    /// whose bootstrap sample excluded `i`. Falls back to the full-forest
    /// prediction if every tree contains the row.
    pub fn predict_oob(&self, x: &Array2<f64>, i: usize) -> f64 {
        let row = x.row(i);
        let row = row.as_slice().unwrap();
        let mut s = 0.0;
        let mut k = 0usize;
        for (t, tree) in self.trees.iter().enumerate() {
            if !self.inbag[t][i] {
                s += tree.predict_row(row);
                k += 1;
            }
        }
        if k == 0 {
            self.predict_row(row)
        } else {
            s / k as f64
        }
    }
}
