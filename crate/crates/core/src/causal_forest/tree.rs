//! Honest causal trees: recursive partitioning that rewards between-leaf
//! variance of treatment effects, with leaf effects estimated on rows the
//! splits never saw.
//!
//! Each tree works with two disjoint row sets from its subsample: `train`
//! rows drive the split search, `estimate` rows supply every leaf's effect
//! estimate and must satisfy the per-arm leaf minima for a split to be
//! admissible. Small nodes are split by exactly evaluating the
//! variance-reward criterion (between-leaf effect variance minus a
//! within-leaf variance penalty); large nodes use a pseudo-outcome
//! surrogate that targets the same quantity at a fraction of the cost.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::tree::sample_features;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ForestParams;

/// Node training size at or below which the split criterion is evaluated
/// exactly; larger nodes use the pseudo-outcome surrogate.
const EXACT_CRITERION_MAX_NODE: usize = 200;

/// An honest causal tree over a subsample of the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalTree {
    nodes: Vec<CfNode>,
    /// Split-search rows (indices into the full dataset).
    pub train_rows: Vec<usize>,
    /// Leaf-estimation rows, disjoint from `train_rows`.
    pub estimate_rows: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CfNode {
    Leaf {
        tau_hat: f64,
        n_treated: usize,
        n_control: usize,
    },
    Split {
        var: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

impl CausalTree {
    /// Leaf effect estimate for a covariate row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_of(row)] {
            CfNode::Leaf { tau_hat, .. } => *tau_hat,
            CfNode::Split { .. } => unreachable!("leaf_of returns a leaf"),
        }
    }

    /// Index of the leaf node a row is routed to.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                CfNode::Leaf { .. } => return at,
                CfNode::Split {
                    var,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*var] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn node(&self, idx: usize) -> &CfNode {
        &self.nodes[idx]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, CfNode::Leaf { .. }))
            .count()
    }

    /// (variable, depth) of every internal node, root at depth 0.
    pub fn split_depths(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![(0usize, 0usize)];
        while let Some((at, depth)) = stack.pop() {
            if let CfNode::Split {
                var, left, right, ..
            } = &self.nodes[at]
            {
                out.push((*var, depth));
                stack.push((*left, depth + 1));
                stack.push((*right, depth + 1));
            }
        }
        out
    }

    /// Recomputes every leaf's effect estimate from the stored estimate
    /// rows with the supplied outcome and treatment vectors, keeping the
    /// split structure frozen. Errors if any leaf loses one of its arms.
    pub fn refit_leaf_estimates(
        &self,
        x: &Array2<f64>,
        y: &[f64],
        d: &[f64],
    ) -> Result<CausalTree> {
        let mut per_leaf: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &i in &self.estimate_rows {
            per_leaf[self.leaf_of(x.row(i).as_slice().unwrap())].push(i);
        }
        let mut nodes = self.nodes.clone();
        for (idx, node) in nodes.iter_mut().enumerate() {
            if let CfNode::Leaf {
                tau_hat,
                n_treated,
                n_control,
            } = node
            {
                let (tau, nt, nc) = leaf_estimate(y, d, &per_leaf[idx]).ok_or_else(|| {
                    Error::Estimation(format!(
                        "leaf {idx} has no rows from one treatment arm after re-estimation"
                    ))
                })?;
                *tau_hat = tau;
                *n_treated = nt;
                *n_control = nc;
            }
        }
        Ok(CausalTree {
            nodes,
            train_rows: self.train_rows.clone(),
            estimate_rows: self.estimate_rows.clone(),
        })
    }
}

/// Difference in mean outcomes between treated and control rows; `None`
/// when either arm is empty.
fn leaf_estimate(y: &[f64], d: &[f64], rows: &[usize]) -> Option<(f64, usize, usize)> {
    let (mut st, mut sc) = (0.0f64, 0.0f64);
    let (mut nt, mut nc) = (0usize, 0usize);
    for &i in rows {
        if d[i] == 1.0 {
            st += y[i];
            nt += 1;
        } else {
            sc += y[i];
            nc += 1;
        }
    }
    if nt == 0 || nc == 0 {
        return None;
    }
    Some((st / nt as f64 - sc / nc as f64, nt, nc))
}

fn has_both_arms(d: &[f64], rows: &[usize]) -> bool {
    let mut any_t = false;
    let mut any_c = false;
    for &i in rows {
        if d[i] == 1.0 {
            any_t = true;
        } else {
            any_c = true;
        }
        if any_t && any_c {
            return true;
        }
    }
    false
}

/// Per-side accumulation of the training statistics a split score needs.
#[derive(Debug, Clone, Copy, Default)]
struct SideStats {
    n_t: usize,
    n_c: usize,
    sum_t: f64,
    sum_c: f64,
    ss_t: f64,
    ss_c: f64,
    rho_sum: f64,
    n: usize,
}

impl SideStats {
    fn add(&mut self, yi: f64, treated: bool, rho: f64) {
        if treated {
            self.n_t += 1;
            self.sum_t += yi;
            self.ss_t += yi * yi;
        } else {
            self.n_c += 1;
            self.sum_c += yi;
            self.ss_c += yi * yi;
        }
        self.rho_sum += rho;
        self.n += 1;
    }

    fn minus(&self, other: &SideStats) -> SideStats {
        SideStats {
            n_t: self.n_t - other.n_t,
            n_c: self.n_c - other.n_c,
            sum_t: self.sum_t - other.sum_t,
            sum_c: self.sum_c - other.sum_c,
            ss_t: self.ss_t - other.ss_t,
            ss_c: self.ss_c - other.ss_c,
            rho_sum: self.rho_sum - other.rho_sum,
            n: self.n - other.n,
        }
    }

    /// Exact criterion contribution of one leaf: between-leaf effect term
    /// minus the within-leaf variance penalty. `None` when an arm is
    /// missing so the effect is undefined.
    fn exact_contribution(&self, alpha: f64, inv_n_train: f64, pbar: f64) -> Option<f64> {
        if self.n_t == 0 || self.n_c == 0 {
            return None;
        }
        let mean_t = self.sum_t / self.n_t as f64;
        let mean_c = self.sum_c / self.n_c as f64;
        let tau = mean_t - mean_c;
        let var_t = if self.n_t >= 2 {
            ((self.ss_t - self.sum_t * mean_t) / (self.n_t - 1) as f64).max(0.0)
        } else {
            0.0
        };
        let var_c = if self.n_c >= 2 {
            ((self.ss_c - self.sum_c * mean_c) / (self.n_c - 1) as f64).max(0.0)
        } else {
            0.0
        };
        let penalty = var_t / pbar + var_c / (1.0 - pbar);
        Some(self.n as f64 * tau * tau * inv_n_train - alpha * penalty)
    }

    /// Surrogate criterion contribution: the squared pseudo-outcome sum
    /// scaled by side size (a regression impurity score on the
    /// pseudo-outcomes).
    fn surrogate_contribution(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.rho_sum * self.rho_sum / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Criterion {
    /// Full variance-reward evaluation; carries root-level constants:
    /// alpha = 1/N_train + 1/N_estimate, inv_n_train = 1/N_train, and the
    /// root training treated share.
    Exact {
        alpha: f64,
        inv_n_train: f64,
        pbar: f64,
    },
    Surrogate,
}

struct NodeTask {
    node_idx: usize,
    train: Vec<usize>,
    est: Vec<usize>,
}

/// Grows an honest causal tree on the given subsample halves.
///
/// `train_rows` drive the split search; `estimate_rows` supply leaf
/// effects and enforce the per-arm leaf minima at every split. The two
/// sets must be disjoint and each must contain both treatment arms.
pub fn grow_causal_tree(
    data: &Dataset,
    train_rows: Vec<usize>,
    estimate_rows: Vec<usize>,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Result<CausalTree> {
    let x = &data.x;
    let y: Vec<f64> = data.y.to_vec();
    let d: Vec<f64> = data.d.to_vec();
    let p = x.ncols();
    let mtry = params.resolved_mtry(p);

    {
        let mut seen = vec![false; data.n()];
        for &i in &train_rows {
            seen[i] = true;
        }
        if estimate_rows.iter().any(|&i| seen[i]) {
            return Err(Error::Estimation(
                "training and estimation rows overlap; honest growth requires disjoint halves"
                    .into(),
            ));
        }
    }
    if train_rows.is_empty() || estimate_rows.is_empty() {
        return Err(Error::Estimation(
            "honest split left an empty training or estimation half".into(),
        ));
    }
    if !has_both_arms(&d, &train_rows) || !has_both_arms(&d, &estimate_rows) {
        return Err(Error::Estimation(
            "subsample is single-armed after the honest split".into(),
        ));
    }

    let n_train_root = train_rows.len() as f64;
    let n_est_root = estimate_rows.len() as f64;
    let pbar = {
        let nt = train_rows.iter().filter(|&&i| d[i] == 1.0).count();
        (nt as f64 / n_train_root).clamp(1e-12, 1.0 - 1e-12)
    };
    let alpha = 1.0 / n_train_root + 1.0 / n_est_root;
    let inv_n_train = 1.0 / n_train_root;

    let mut tree = CausalTree {
        nodes: vec![CfNode::Leaf {
            tau_hat: 0.0,
            n_treated: 0,
            n_control: 0,
        }],
        train_rows: train_rows.clone(),
        estimate_rows: estimate_rows.clone(),
    };
    let mut stack = vec![NodeTask {
        node_idx: 0,
        train: train_rows,
        est: estimate_rows,
    }];

    while let Some(task) = stack.pop() {
        let criterion = if task.train.len() <= EXACT_CRITERION_MAX_NODE {
            Criterion::Exact {
                alpha,
                inv_n_train,
                pbar,
            }
        } else {
            Criterion::Surrogate
        };
        let best = best_split(x, &y, &d, &task.train, &task.est, mtry, params, criterion, rng);

        match best {
            Some((var, threshold)) => {
                let (tr_l, tr_r): (Vec<usize>, Vec<usize>) =
                    task.train.iter().partition(|&&i| x[[i, var]] <= threshold);
                let (es_l, es_r): (Vec<usize>, Vec<usize>) =
                    task.est.iter().partition(|&&i| x[[i, var]] <= threshold);
                let left = tree.nodes.len();
                let right = left + 1;
                tree.nodes.push(CfNode::Leaf {
                    tau_hat: 0.0,
                    n_treated: 0,
                    n_control: 0,
                });
                tree.nodes.push(CfNode::Leaf {
                    tau_hat: 0.0,
                    n_treated: 0,
                    n_control: 0,
                });
                tree.nodes[task.node_idx] = CfNode::Split {
                    var,
                    threshold,
                    left,
                    right,
                };
                stack.push(NodeTask {
                    node_idx: left,
                    train: tr_l,
                    est: es_l,
                });
                stack.push(NodeTask {
                    node_idx: right,
                    train: tr_r,
                    est: es_r,
                });
            }
            None => {
                let (tau, nt, nc) = leaf_estimate(&y, &d, &task.est).ok_or_else(|| {
                    Error::Estimation(
                        "a leaf lost one treatment arm on the estimation half".into(),
                    )
                })?;
                tree.nodes[task.node_idx] = CfNode::Leaf {
                    tau_hat: tau,
                    n_treated: nt,
                    n_control: nc,
                };
            }
        }
    }
    Ok(tree)
}

/// Best admissible split at a node, or `None` to make it a leaf.
#[allow(clippy::too_many_arguments)]
fn best_split(
    x: &Array2<f64>,
    y: &[f64],
    d: &[f64],
    train: &[usize],
    est: &[usize],
    mtry: usize,
    params: &ForestParams,
    criterion: Criterion,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, f64)> {
    if train.len() < 2 {
        return None;
    }

    // Pseudo-outcomes for the surrogate: within-node effect regression
    // residuals, whose group sums track how the local effect estimate
    // would move under a split.
    let rho: Vec<f64> = match criterion {
        Criterion::Exact { .. } => vec![0.0; train.len()],
        Criterion::Surrogate => {
            let n = train.len() as f64;
            let dbar = train.iter().map(|&i| d[i]).sum::<f64>() / n;
            let ybar = train.iter().map(|&i| y[i]).sum::<f64>() / n;
            let var_d: f64 = train.iter().map(|&i| (d[i] - dbar) * (d[i] - dbar)).sum();
            if var_d <= 0.0 {
                return None;
            }
            let cov: f64 = train
                .iter()
                .map(|&i| (d[i] - dbar) * (y[i] - ybar))
                .sum();
            let tau = cov / var_d;
            train
                .iter()
                .map(|&i| (d[i] - dbar) * ((y[i] - ybar) - tau * (d[i] - dbar)))
                .collect()
        }
    };

    // Parent baseline the split must beat.
    let mut parent = SideStats::default();
    for (k, &i) in train.iter().enumerate() {
        parent.add(y[i], d[i] == 1.0, rho[k]);
    }
    let parent_score = match criterion {
        Criterion::Exact {
            alpha,
            inv_n_train,
            pbar,
        } => parent.exact_contribution(alpha, inv_n_train, pbar)?,
        Criterion::Surrogate => parent.surrogate_contribution(),
    };
    let tol = 1e-12 * (1.0 + parent_score.abs());

    let mut best: Option<(usize, f64)> = None;
    let mut best_gain = tol;

    for var in sample_features(x.ncols(), mtry, rng) {
        // Train rows sorted by the candidate variable, carrying the
        // per-row statistics the sweep accumulates.
        let mut tr: Vec<(f64, f64, bool, f64)> = train
            .iter()
            .enumerate()
            .map(|(k, &i)| (x[[i, var]], y[i], d[i] == 1.0, rho[k]))
            .collect();
        tr.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // Estimate rows sorted the same way for admissibility counting.
        let mut ev: Vec<(f64, bool)> = est
            .iter()
            .map(|&i| (x[[i, var]], d[i] == 1.0))
            .collect();
        ev.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut left = SideStats::default();
        let mut est_ptr = 0usize;
        let (mut est_t_left, mut est_c_left) = (0usize, 0usize);
        let (est_t_all, est_c_all) = {
            let t = ev.iter().filter(|(_, tr)| *tr).count();
            (t, ev.len() - t)
        };

        for k in 0..tr.len() - 1 {
            let (xv, yv, treated, rv) = tr[k];
            left.add(yv, treated, rv);
            if xv >= tr[k + 1].0 {
                continue; // not a boundary between distinct values
            }
            let threshold = 0.5 * (xv + tr[k + 1].0);
            while est_ptr < ev.len() && ev[est_ptr].0 <= threshold {
                if ev[est_ptr].1 {
                    est_t_left += 1;
                } else {
                    est_c_left += 1;
                }
                est_ptr += 1;
            }
            // Admissibility: both children meet the per-arm minima on the
            // estimation half.
            let est_t_right = est_t_all - est_t_left;
            let est_c_right = est_c_all - est_c_left;
            if est_t_left < params.min_treated_per_leaf
                || est_c_left < params.min_control_per_leaf
                || est_t_right < params.min_treated_per_leaf
                || est_c_right < params.min_control_per_leaf
            {
                continue;
            }
            let right = parent.minus(&left);
            let gain = match criterion {
                Criterion::Exact {
                    alpha,
                    inv_n_train,
                    pbar,
                } => {
                    let (Some(l), Some(r)) = (
                        left.exact_contribution(alpha, inv_n_train, pbar),
                        right.exact_contribution(alpha, inv_n_train, pbar),
                    ) else {
                        continue; // a side lost an arm on the training half
                    };
                    l + r - parent_score
                }
                Criterion::Surrogate => {
                    left.surrogate_contribution() + right.surrogate_contribution()
                        - parent_score
                }
            };
            if gain > best_gain {
                best_gain = gain;
                best = Some((var, threshold));
            }
        }
    }
    best
}
