//! Design-matrix transforms: pairwise interactions and standardization.

use crate::error::{Error, Result};
use ndarray::Array2;

const MAX_EXPANDED_COLUMNS: usize = 1_000_000;

/// Appends all pairwise interaction columns to `x`.
///
/// Output columns are the originals followed by products `x_i * x_j` for
/// `i < j` in index order, named `"a:b"` from the input names. With
/// `include_squares` the squared terms `x_i * x_i` (named `"a:a"`) are
/// appended as well; by default they are not.
pub fn expand_interactions(
    x: &Array2<f64>,
    names: &[String],
    include_squares: bool,
) -> Result<(Array2<f64>, Vec<String>)> {
    let (n, p) = x.dim();
    assert_eq!(names.len(), p, "one name per column");
    let pairs = p * (p - 1) / 2 + if include_squares { p } else { 0 };
    let total = p + pairs;
    if total > MAX_EXPANDED_COLUMNS {
        return Err(Error::Config(format!(
            "interaction expansion would produce {total} columns (limit {MAX_EXPANDED_COLUMNS})"
        )));
    }
    let mut out = Array2::<f64>::zeros((n, total));
    let mut out_names = Vec::with_capacity(total);
    out.slice_mut(ndarray::s![.., ..p]).assign(x);
    out_names.extend_from_slice(names);
    let mut c = p;
    for i in 0..p {
        let j_start = if include_squares { i } else { i + 1 };
        for j in j_start..p {
            for r in 0..n {
                out[[r, c]] = x[[r, i]] * x[[r, j]];
            }
            out_names.push(format!("{}:{}", names[i], names[j]));
            c += 1;
        }
    }
    Ok((out, out_names))
}

/// A standardized matrix with the statistics needed to undo the transform.
#[derive(Debug, Clone)]
pub struct Standardized {
    /// Column-standardized matrix.
    pub x: Array2<f64>,
    /// Per-column means of the input.
    pub centers: Vec<f64>,
    /// Per-column sample standard deviations (1.0 for constant columns).
    pub scales: Vec<f64>,
    /// True for columns that were constant in the input.
    pub constant: Vec<bool>,
}

/// Centers each column to mean zero and scales to sample standard deviation
/// one. Constant columns are centered only and flagged.
pub fn standardize(x: &Array2<f64>) -> Standardized {
    let (n, p) = x.dim();
    let mut out = x.clone();
    let mut centers = vec![0.0; p];
    let mut scales = vec![1.0; p];
    let mut constant = vec![false; p];
    for j in 0..p {
        let col = x.column(j);
        let m = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        let sdev = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        centers[j] = m;
        if sdev > 0.0 {
            scales[j] = sdev;
        } else {
            constant[j] = true;
        }
        for r in 0..n {
            out[[r, j]] = (x[[r, j]] - m) / scales[j];
        }
    }
    Standardized {
        x: out,
        centers,
        scales,
        constant,
    }
}
