//! Regression trees: greedy variance-reduction growth shared by the CART
//! learner, the random forest, and boosting; plus cost-complexity pruning
//! with cross-validated penalty selection for the standalone CART learner.

use crate::dataset::make_split_plan;
use crate::error::Result;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Arena-allocated regression tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegTree {
    pub nodes: Vec<RegNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RegNode {
    Leaf {
        value: f64,
    },
    Split {
        var: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

impl RegTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                RegNode::Leaf { value } => return *value,
                RegNode::Split {
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

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, RegNode::Leaf { .. }))
            .count()
    }

    /// Maximum depth over leaves (root split at depth 0).
    pub fn depth(&self) -> usize {
        fn walk(tree: &RegTree, at: usize, d: usize) -> usize {
            match &tree.nodes[at] {
                RegNode::Leaf { .. } => d,
                RegNode::Split { left, right, .. } => {
                    walk(tree, *left, d + 1).max(walk(tree, *right, d + 1))
                }
            }
        }
        walk(self, 0, 0)
    }
}

/// Controls for greedy growth.
#[derive(Debug, Clone, Copy)]
pub struct GrowOptions {
    /// Number of candidate features per node (`p` for exhaustive CART).
    pub mtry: usize,
    /// Minimum rows in each child.
    pub min_leaf: usize,
    /// Minimum rows in a node to attempt a split.
    pub min_split: usize,
    /// Maximum depth; 0 means unlimited.
    pub max_depth: usize,
}

/// Grows a regression tree on `rows`, choosing at each node the split that
/// maximizes the weighted sum-of-squares reduction.
pub fn grow_reg_tree(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    rows: &[usize],
    opts: &GrowOptions,
    rng: &mut ChaCha8Rng,
) -> RegTree {
    let mut tree = RegTree { nodes: Vec::new() };
    let mut rows = rows.to_vec();
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
    grow_node(x, y, &wt, &mut rows, opts, rng, &mut tree, 0);
    tree
}

/// Recursively grows the node covering `rows`; returns its index.
#[allow(clippy::too_many_arguments)]
fn grow_node(
    x: &Array2<f64>,
    y: &[f64],
    wt: &impl Fn(usize) -> f64,
    rows: &mut [usize],
    opts: &GrowOptions,
    rng: &mut ChaCha8Rng,
    tree: &mut RegTree,
    depth: usize,
) -> usize {
    let (mut wsum, mut s) = (0.0, 0.0);
    for &i in rows.iter() {
        let w = wt(i);
        wsum += w;
        s += w * y[i];
    }
    let node_mean = s / wsum;

    let can_split = rows.len() >= opts.min_split.max(2 * opts.min_leaf)
        && (opts.max_depth == 0 || depth < opts.max_depth);
    let best = if can_split {
        best_split(x, y, wt, rows, opts, rng)
    } else {
        None
    };

    match best {
        None => {
            tree.nodes.push(RegNode::Leaf { value: node_mean });
            tree.nodes.len() - 1
        }
        Some((var, threshold)) => {
            // Partition rows in place: left block, then right block.
            let mid = partition_rows(x, rows, var, threshold);
            let (left_rows, right_rows) = rows.split_at_mut(mid);
            let id = tree.nodes.len();
            tree.nodes.push(RegNode::Split {
                var,
                threshold,
                left: 0,
                right: 0,
            });
            let left = grow_node(x, y, wt, left_rows, opts, rng, tree, depth + 1);
            let right = grow_node(x, y, wt, right_rows, opts, rng, tree, depth + 1);
            if let RegNode::Split {
                left: l, right: r, ..
            } = &mut tree.nodes[id]
            {
                *l = left;
                *r = right;
            }
            id
        }
    }
}

fn partition_rows(x: &Array2<f64>, rows: &mut [usize], var: usize, threshold: f64) -> usize {
    let mut lo = 0usize;
    let mut hi = rows.len();
    while lo < hi {
        if x[[rows[lo], var]] <= threshold {
            lo += 1;
        } else {
            hi -= 1;
            rows.swap(lo, hi);
        }
    }
    lo
}

/// Exhaustive scan over `mtry` sampled features: sort the node's rows by
/// each candidate feature and sweep prefix statistics across thresholds.
fn best_split(
    x: &Array2<f64>,
    y: &[f64],
    wt: &impl Fn(usize) -> f64,
    rows: &[usize],
    opts: &GrowOptions,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, f64)> {
    let p = x.ncols();
    let features = sample_features(p, opts.mtry.clamp(1, p), rng);

    let (mut wsum, mut s, mut ss) = (0.0, 0.0, 0.0);
    for &i in rows {
        let w = wt(i);
        wsum += w;
        s += w * y[i];
        ss += w * y[i] * y[i];
    }
    let node_sse = ss - s * s / wsum;
    // A numerically pure node cannot be improved.
    if node_sse <= 1e-12 * ss.abs() {
        return None;
    }
    let parent_score = s * s / wsum;

    let mut best: Option<(usize, f64, f64)> = None; // (var, threshold, score)
    let mut order: Vec<usize> = Vec::with_capacity(rows.len());
    for &j in &features {
        order.clear();
        order.extend_from_slice(rows);
        order.sort_by(|&a, &b| x[[a, j]].partial_cmp(&x[[b, j]]).unwrap());
        let (mut wl, mut sl) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            let i = order[k];
            let w = wt(i);
            wl += w;
            sl += w * y[i];
            let here = x[[i, j]];
            let next = x[[order[k + 1], j]];
            if here == next {
                continue;
            }
            if k + 1 < opts.min_leaf || order.len() - k - 1 < opts.min_leaf {
                continue;
            }
            let wr = wsum - wl;
            let sr = s - sl;
            // Maximizing sum of per-child (sum^2 / weight) maximizes the
            // SSE reduction; the parent term is constant.
            let score = sl * sl / wl + sr * sr / wr;
            if score > best.map_or(parent_score * (1.0 + 1e-12) + 1e-300, |b| b.2) {
                best = Some((j, 0.5 * (here + next), score));
            }
        }
    }
    best.map(|(var, threshold, _)| (var, threshold))
}

/// Samples `m` distinct feature indices by partial Fisher-Yates.
pub(crate) fn sample_features(p: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m >= p {
        return (0..p).collect();
    }
    let mut idx: Vec<usize> = (0..p).collect();
    for k in 0..m {
        let j = k + rng.random_range(0..p - k);
        idx.swap(k, j);
    }
    idx.truncate(m);
    idx
}

// ---------------------------------------------------------------------------
// Cost-complexity pruning
// ---------------------------------------------------------------------------

/// Per-node pruning statistics: own SSE and subtree SSE / leaf count.
struct PruneStats {
    own_sse: Vec<f64>,
    sub_sse: Vec<f64>,
    sub_leaves: Vec<usize>,
}

fn prune_stats(tree: &RegTree, x: &Array2<f64>, y: &[f64], wt: &impl Fn(usize) -> f64, rows: &[usize]) -> PruneStats {
    let m = tree.nodes.len();
    let mut stats = PruneStats {
        own_sse: vec![0.0; m],
        sub_sse: vec![0.0; m],
        sub_leaves: vec![0; m],
    };
    // Route rows to every node on their path, accumulating moments.
    let mut wsum = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut ss = vec![0.0; m];
    for &i in rows {
        let w = wt(i);
        let mut at = 0usize;
        loop {
            wsum[at] += w;
            s[at] += w * y[i];
            ss[at] += w * y[i] * y[i];
            match &tree.nodes[at] {
                RegNode::Leaf { .. } => break,
                RegNode::Split {
                    var,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[[i, *var]] <= *threshold { *left } else { *right };
                }
            }
        }
    }
    for at in 0..m {
        stats.own_sse[at] = if wsum[at] > 0.0 {
            (ss[at] - s[at] * s[at] / wsum[at]).max(0.0)
        } else {
            0.0
        };
    }
    fn fill(tree: &RegTree, at: usize, stats: &mut PruneStats) {
        match &tree.nodes[at] {
            RegNode::Leaf { .. } => {
                stats.sub_sse[at] = stats.own_sse[at];
                stats.sub_leaves[at] = 1;
            }
            RegNode::Split { left, right, .. } => {
                fill(tree, *left, stats);
                fill(tree, *right, stats);
                stats.sub_sse[at] = stats.sub_sse[*left] + stats.sub_sse[*right];
                stats.sub_leaves[at] = stats.sub_leaves[*left] + stats.sub_leaves[*right];
            }
        }
    }
    fill(tree, 0, &mut stats);
    stats
}

/// Returns the optimal cost-complexity pruned tree at penalty `alpha`:
/// every internal node whose per-leaf SSE improvement is at most `alpha`
/// collapses to a leaf (bottom-up, so the result is the standard smallest
/// minimizing subtree).
pub fn prune_at(
    tree: &RegTree,
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    rows: &[usize],
    alpha: f64,
) -> RegTree {
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
    let stats = prune_stats(tree, x, y, &wt, rows);
    let mut out = RegTree { nodes: Vec::new() };
    // (pruned subtree SSE, leaves) computed bottom-up while rebuilding.
    fn rebuild(
        tree: &RegTree,
        at: usize,
        alpha: f64,
        stats: &PruneStats,
        out: &mut RegTree,
        node_value: &dyn Fn(usize) -> f64,
    ) -> (usize, f64, usize) {
        match &tree.nodes[at] {
            RegNode::Leaf { value } => {
                out.nodes.push(RegNode::Leaf { value: *value });
                (out.nodes.len() - 1, stats.own_sse[at], 1)
            }
            RegNode::Split {
                var,
                threshold,
                left,
                right,
            } => {
                let id = out.nodes.len();
                out.nodes.push(RegNode::Split {
                    var: *var,
                    threshold: *threshold,
                    left: 0,
                    right: 0,
                });
                let (l, l_sse, l_leaves) = rebuild(tree, *left, alpha, stats, out, node_value);
                let (r, r_sse, r_leaves) = rebuild(tree, *right, alpha, stats, out, node_value);
                let sub_sse = l_sse + r_sse;
                let sub_leaves = l_leaves + r_leaves;
                let g = (stats.own_sse[at] - sub_sse) / (sub_leaves as f64 - 1.0);
                if g <= alpha {
                    // Collapse: drop the children we just pushed.
                    out.nodes.truncate(id);
                    out.nodes.push(RegNode::Leaf {
                        value: node_value(at),
                    });
                    (id, stats.own_sse[at], 1)
                } else {
                    if let RegNode::Split {
                        left: lo, right: ro, ..
                    } = &mut out.nodes[id]
                    {
                        *lo = l;
                        *ro = r;
                    }
                    (id, sub_sse, sub_leaves)
                }
            }
        }
    }
    // Collapsed nodes predict the training mean of the rows they cover.
    let wt2 = |i: usize| weights.map_or(1.0, |w| w[i]);
    let means = node_means(tree, x, y, &wt2, rows);
    let value_of = move |at: usize| means[at];
    rebuild(tree, 0, alpha, &stats, &mut out, &value_of);
    out
}

fn node_means(tree: &RegTree, x: &Array2<f64>, y: &[f64], wt: &impl Fn(usize) -> f64, rows: &[usize]) -> Vec<f64> {
    let m = tree.nodes.len();
    let mut wsum = vec![0.0; m];
    let mut s = vec![0.0; m];
    for &i in rows {
        let w = wt(i);
        let mut at = 0usize;
        loop {
            wsum[at] += w;
            s[at] += w * y[i];
            match &tree.nodes[at] {
                RegNode::Leaf { .. } => break,
                RegNode::Split {
                    var,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[[i, *var]] <= *threshold { *left } else { *right };
                }
            }
        }
    }
    (0..m)
        .map(|at| if wsum[at] > 0.0 { s[at] / wsum[at] } else { 0.0 })
        .collect()
}

/// Weakest-link alpha sequence of the tree (ascending, deduplicated).
fn alpha_sequence(tree: &RegTree, x: &Array2<f64>, y: &[f64], weights: Option<&[f64]>, rows: &[usize]) -> Vec<f64> {
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut current = tree.clone();
    let mut alphas = Vec::new();
    loop {
        if current.n_leaves() <= 1 {
            break;
        }
        let stats = prune_stats(&current, x, y, &wt, rows);
        let mut weakest = f64::INFINITY;
        for at in 0..current.nodes.len() {
            if let RegNode::Split { .. } = current.nodes[at] {
                let g = (stats.own_sse[at] - stats.sub_sse[at])
                    / (stats.sub_leaves[at] as f64 - 1.0);
                weakest = weakest.min(g);
            }
        }
        if !weakest.is_finite() {
            break;
        }
        alphas.push(weakest.max(0.0));
        current = prune_at(&current, x, y, weights, rows, weakest);
    }
    alphas.dedup();
    alphas
}

/// Grows a CART tree and prunes it at a penalty chosen by K-fold
/// cross-validation over the weakest-link alpha sequence.
pub fn fit_cart(
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &GrowOptions,
    cv_folds: usize,
    seed: u64,
) -> Result<RegTree> {
    let n = x.nrows();
    let rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = grow_reg_tree(x, y, weights, &rows, opts, &mut rng);
    if full.n_leaves() <= 1 {
        return Ok(full);
    }
    let alphas = alpha_sequence(&full, x, y, weights, &rows);
    if alphas.is_empty() {
        return Ok(full);
    }
    // Candidate penalties: 0, geometric midpoints, and one past the end.
    let mut candidates = vec![0.0];
    for w in alphas.windows(2) {
        candidates.push((w[0].max(1e-300) * w[1].max(1e-300)).sqrt());
    }
    candidates.push(alphas[alphas.len() - 1] * 1.5 + 1e-12);

    let folds = cv_folds.clamp(2, n);
    let plan = make_split_plan(n, folds, 1, crate::stats::derive_seed(seed, &[0xCA27]))?;
    let mut cv_err = vec![0.0f64; candidates.len()];
    for fold in 0..folds {
        let train = plan.complement_rows(0, fold);
        let valid = plan.fold_rows(0, fold);
        let mut fold_rng = ChaCha8Rng::seed_from_u64(crate::stats::derive_seed(seed, &[0xF01D, fold as u64]));
        let fold_tree = grow_reg_tree(x, y, weights, &train, opts, &mut fold_rng);
        for (c, &alpha) in candidates.iter().enumerate() {
            let pruned = prune_at(&fold_tree, x, y, weights, &train, alpha);
            let mut err = 0.0;
            for &i in &valid {
                let e = y[i] - pruned.predict_row(x.row(i).as_slice().unwrap());
                err += e * e;
            }
            cv_err[c] += err;
        }
    }
    // Ties prefer the larger penalty (simpler tree).
    let mut best = 0usize;
    for c in 1..candidates.len() {
        if cv_err[c] <= cv_err[best] {
            best = c;
        }
    }
    Ok(prune_at(&full, x, y, weights, &rows, candidates[best]))
}
