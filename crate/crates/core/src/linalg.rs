//! Dense symmetric linear algebra for the regression layer.
//!
//! Regression designs here are small (tens of columns), so normal equations
//! with a pivoted sweep inverse are accurate enough and keep the crate free
//! of external BLAS/LAPACK linkage. Rank deficiency is detected while
//! sweeping and reported with the offending column names.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Computes X' diag(w) X. With `w = None` the weights are all one.
pub fn xtwx(x: &Array2<f64>, w: Option<&[f64]>) -> Array2<f64> {
    let (n, k) = x.dim();
    let mut a = Array2::<f64>::zeros((k, k));
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]);
        let row = x.row(i);
        for a_idx in 0..k {
            let xa = row[a_idx] * wi;
            if xa == 0.0 {
                continue;
            }
            for b_idx in a_idx..k {
                a[[a_idx, b_idx]] += xa * row[b_idx];
            }
        }
    }
    for a_idx in 0..k {
        for b_idx in 0..a_idx {
            a[[a_idx, b_idx]] = a[[b_idx, a_idx]];
        }
    }
    a
}

/// Computes X' diag(w) y. With `w = None` the weights are all one.
pub fn xtwy(x: &Array2<f64>, y: &[f64], w: Option<&[f64]>) -> Array1<f64> {
    let (n, k) = x.dim();
    let mut v = Array1::<f64>::zeros(k);
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]) * y[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        for j in 0..k {
            v[j] += wi * row[j];
        }
    }
    v
}

/// Inverts a symmetric positive semi-definite matrix by sweeping with
/// diagonal pivoting.
///
/// Pivots are chosen greedily by largest remaining diagonal. A column whose
/// residual diagonal falls below `1e-10` times its original diagonal is
/// linearly dependent on the columns already swept; in that case the error
/// lists the dependent column names so the caller can fix the design.
pub fn sym_inverse_named(a: &Array2<f64>, names: &[String]) -> Result<Array2<f64>> {
    let k = a.nrows();
    assert_eq!(a.ncols(), k, "matrix must be square");
    assert_eq!(names.len(), k, "one name per column");
    let mut m = a.clone();
    let diag0: Vec<f64> = (0..k).map(|j| m[[j, j]]).collect();
    let mut swept = vec![false; k];

    for _ in 0..k {
        // Largest remaining diagonal, relative to the column's original scale.
        let mut pivot = None;
        let mut best = 0.0;
        for j in 0..k {
            if swept[j] || diag0[j] <= 0.0 {
                continue;
            }
            let rel = m[[j, j]] / diag0[j];
            if pivot.is_none() || rel > best {
                best = rel;
                pivot = Some(j);
            }
        }
        let j = match pivot {
            Some(j) if best > 1e-10 => j,
            _ => break,
        };
        sweep(&mut m, j);
        swept[j] = true;
    }

    let dependent: Vec<&str> = (0..k)
        .filter(|&j| !swept[j])
        .map(|j| names[j].as_str())
        .collect();
    if !dependent.is_empty() {
        return Err(Error::Estimation(format!(
            "design matrix is rank deficient; collinear columns: {}",
            dependent.join(", ")
        )));
    }
    // Sweeping every pivot of an SPD matrix yields -A^{-1}.
    m.mapv_inplace(|v| -v);
    Ok(m)
}

fn sweep(m: &mut Array2<f64>, p: usize) {
    let k = m.nrows();
    let d = m[[p, p]];
    for i in 0..k {
        for j in 0..k {
            if i != p && j != p {
                m[[i, j]] -= m[[i, p]] * m[[p, j]] / d;
            }
        }
    }
    for i in 0..k {
        if i != p {
            m[[i, p]] /= d;
            m[[p, i]] /= d;
        }
    }
    m[[p, p]] = -1.0 / d;
}
