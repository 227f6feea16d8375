//! Estimation-ready data containers and the utilities that produce them:
//! CSV ingestion with role mapping, interaction expansion, standardization,
//! cross-fitting fold plans, and synthetic data generators with known truth.

mod csv_io;
mod design;
mod dgp;
mod split;

pub use csv_io::{load_csv, ColumnSchema, LoadedCsv};
pub use design::{expand_interactions, standardize, Standardized};
pub use dgp::{generate_dgp, DgpSample};
pub use split::{make_split_plan, SplitPlan};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// A rectangular estimation sample: outcome `y`, treatment `d`, covariates
/// `x`, and optional instruments, cluster ids, and randomization-block ids.
///
/// All numeric values are finite and all vectors share the same row count;
/// both are enforced at construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Outcome, one entry per row.
    pub y: Array1<f64>,
    /// Treatment (real-valued in general; binary {0,1} where a method requires it).
    pub d: Array1<f64>,
    /// Covariate matrix, rows aligned with `y` and `d`.
    pub x: Array2<f64>,
    /// Optional instrument matrix for IV estimation.
    pub instruments: Option<Array2<f64>>,
    /// Optional cluster identifiers for cluster-robust procedures.
    pub cluster_id: Option<Vec<i64>>,
    /// Optional randomization-block identifiers.
    pub block_id: Option<Vec<i64>>,
    /// Covariate column names, unique, one per column of `x`.
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking row alignment, finiteness, and name
    /// uniqueness.
    pub fn new(
        y: Array1<f64>,
        d: Array1<f64>,
        x: Array2<f64>,
        instruments: Option<Array2<f64>>,
        cluster_id: Option<Vec<i64>>,
        block_id: Option<Vec<i64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if d.len() != n || x.nrows() != n {
            return Err(Error::Data(format!(
                "row mismatch: y has {n} rows, d has {}, x has {}",
                d.len(),
                x.nrows()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::Data(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for name in &covariate_names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Data(format!("duplicate column name: {name}")));
                }
            }
        }
        if let Some(z) = &instruments {
            if z.nrows() != n {
                return Err(Error::Data("instrument rows do not match outcome rows".into()));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite instrument value".into()));
            }
        }
        if let Some(c) = &cluster_id {
            if c.len() != n {
                return Err(Error::Data("cluster ids do not match outcome rows".into()));
            }
        }
        if let Some(b) = &block_id {
            if b.len() != n {
                return Err(Error::Data("block ids do not match outcome rows".into()));
            }
        }
        if y.iter().any(|v| !v.is_finite())
            || d.iter().any(|v| !v.is_finite())
            || x.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Data("non-finite value in y, d, or x".into()));
        }
        Ok(Dataset {
            y,
            d,
            x,
            instruments,
            cluster_id,
            block_id,
            covariate_names,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariate columns.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// True when every treatment value is exactly 0 or 1.
    pub fn is_binary_treatment(&self) -> bool {
        self.d.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Returns the rows at `idx` (in the given order) as a new dataset.
    /// Hex digest of the sample contents (shapes, outcome, treatment,
    /// covariates, and column names). Two datasets share a fingerprint
    /// exactly when these agree bit-for-bit.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.n().to_le_bytes());
        h.update(self.p().to_le_bytes());
        for v in self.y.iter().chain(self.d.iter()).chain(self.x.iter()) {
            h.update(v.to_le_bytes());
        }
        for name in &self.covariate_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(digest.len() * 2);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let take1 = |a: &Array1<f64>| Array1::from_iter(idx.iter().map(|&i| a[i]));
        let take2 = |m: &Array2<f64>| {
            let mut out = Array2::zeros((idx.len(), m.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        Dataset {
            y: take1(&self.y),
            d: take1(&self.d),
            x: take2(&self.x),
            instruments: self.instruments.as_ref().map(&take2),
            cluster_id: self
                .cluster_id
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            block_id: self
                .block_id
                .as_ref()
                .map(|b| idx.iter().map(|&i| b[i]).collect()),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Generates default covariate names `x1..xp`.
pub(crate) fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{i}")).collect()
}
