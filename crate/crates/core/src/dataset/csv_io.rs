//! CSV ingestion with explicit column-role mapping.

use super::Dataset;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::collections::HashMap;
use std::path::Path;

/// Maps CSV columns to estimation roles by header name.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    /// Outcome column.
    pub outcome: String,
    /// Treatment column.
    pub treatment: String,
    /// Covariate columns; `None` selects every column not claimed by
    /// another role, in header order.
    pub covariates: Option<Vec<String>>,
    /// Instrument columns (may be empty).
    pub instruments: Vec<String>,
    /// Cluster-identifier column.
    pub cluster: Option<String>,
    /// Randomization-block column.
    pub block: Option<String>,
}

impl ColumnSchema {
    /// Schema with just an outcome and a treatment; covariates default to
    /// all remaining columns.
    pub fn basic(outcome: &str, treatment: &str) -> Self {
        ColumnSchema {
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            covariates: None,
            instruments: Vec::new(),
            cluster: None,
            block: None,
        }
    }
}

/// A loaded dataset plus ingestion bookkeeping.
#[derive(Debug)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    /// Rows dropped because a mapped cell was empty.
    pub dropped_rows: usize,
}

/// Loads a CSV file and maps columns to roles.
///
/// Rows with an empty value in any mapped column are dropped (listwise) and
/// counted in [`LoadedCsv::dropped_rows`]. Remaining cells in numeric roles
/// must parse as finite numbers. Cluster and block columns may hold
/// arbitrary labels; they are coded to integers by first appearance.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    {
        let mut seen = std::collections::HashSet::new();
        for h in &headers {
            if !seen.insert(h.as_str()) {
                return Err(Error::Data(format!("duplicate column names: {h}")));
            }
        }
    }
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("unknown column: {name}")))
    };

    let y_col = index_of(&schema.outcome)?;
    let d_col = index_of(&schema.treatment)?;
    let z_cols: Vec<usize> = schema
        .instruments
        .iter()
        .map(|z| index_of(z))
        .collect::<Result<_>>()?;
    let cluster_col = schema.cluster.as_deref().map(index_of).transpose()?;
    let block_col = schema.block.as_deref().map(index_of).transpose()?;

    let x_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|c| index_of(c)).collect::<Result<_>>()?,
        None => {
            let mut claimed: Vec<usize> = vec![y_col, d_col];
            claimed.extend(&z_cols);
            claimed.extend(cluster_col);
            claimed.extend(block_col);
            (0..headers.len()).filter(|i| !claimed.contains(i)).collect()
        }
    };
    if x_cols.is_empty() {
        return Err(Error::Config("no covariate columns selected".into()));
    }

    let mut mapped: Vec<usize> = vec![y_col, d_col];
    mapped.extend(&x_cols);
    mapped.extend(&z_cols);
    mapped.extend(cluster_col);
    mapped.extend(block_col);

    let parse_num = |record: &csv::StringRecord, col: usize, row: usize| -> Result<f64> {
        let raw = record.get(col).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| {
            Error::Data(format!(
                "non-numeric value {raw:?} in column {} at data row {}",
                headers[col],
                row + 1
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value in column {} at data row {}",
                headers[col],
                row + 1
            )));
        }
        Ok(v)
    };

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut z_rows: Vec<Vec<f64>> = Vec::new();
    let mut cluster: Vec<i64> = Vec::new();
    let mut block: Vec<i64> = Vec::new();
    let mut cluster_codes: HashMap<String, i64> = HashMap::new();
    let mut block_codes: HashMap<String, i64> = HashMap::new();
    let mut dropped = 0usize;

    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", row + 1)))?;
        if mapped
            .iter()
            .any(|&c| record.get(c).is_none_or(str::is_empty))
        {
            dropped += 1;
            continue;
        }
        y.push(parse_num(&record, y_col, row)?);
        d.push(parse_num(&record, d_col, row)?);
        let xr: Vec<f64> = x_cols
            .iter()
            .map(|&c| parse_num(&record, c, row))
            .collect::<Result<_>>()?;
        x_rows.push(xr);
        if !z_cols.is_empty() {
            let zr: Vec<f64> = z_cols
                .iter()
                .map(|&c| parse_num(&record, c, row))
                .collect::<Result<_>>()?;
            z_rows.push(zr);
        }
        if let Some(c) = cluster_col {
            let label = record.get(c).unwrap().to_string();
            let next = cluster_codes.len() as i64;
            cluster.push(*cluster_codes.entry(label).or_insert(next));
        }
        if let Some(b) = block_col {
            let label = record.get(b).unwrap().to_string();
            let next = block_codes.len() as i64;
            block.push(*block_codes.entry(label).or_insert(next));
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::Data(format!(
            "no usable rows in {} ({dropped} dropped for missing values)",
            path.display()
        )));
    }
    let p = x_cols.len();
    let x = Array2::from_shape_vec((n, p), x_rows.into_iter().flatten().collect()).unwrap();
    let instruments = if z_cols.is_empty() {
        None
    } else {
        Some(Array2::from_shape_vec((n, z_cols.len()), z_rows.into_iter().flatten().collect()).unwrap())
    };
    let covariate_names: Vec<String> = x_cols.iter().map(|&c| headers[c].clone()).collect();

    let dataset = Dataset::new(
        Array1::from_vec(y),
        Array1::from_vec(d),
        x,
        instruments,
        (cluster_col.is_some()).then_some(cluster),
        (block_col.is_some()).then_some(block),
        covariate_names,
    )?;
    Ok(LoadedCsv {
        dataset,
        dropped_rows: dropped,
    })
}
