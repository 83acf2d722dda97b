//! Input samples, CSV ingestion and treatment assignment.
//!
//! A [`Sample`] holds the outcome, the running variable and the raw covariate
//! columns used by one invocation. Rows with a missing value in any used
//! column are removed (listwise deletion) and the number of removed rows is
//! kept on the sample.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};

/// Values of a raw covariate column.
#[derive(Debug, Clone, PartialEq)]
pub enum CovValues {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl CovValues {
    pub fn len(&self) -> usize {
        match self {
            CovValues::Numeric(v) => v.len(),
            CovValues::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> CovValues {
        match self {
            CovValues::Numeric(v) => CovValues::Numeric(rows.iter().map(|&i| v[i]).collect()),
            CovValues::Text(v) => CovValues::Text(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// A named raw covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: CovValues,
}

/// One observed level of a factor column.
#[derive(Debug, Clone, PartialEq)]
pub enum Level {
    Num(f64),
    Text(String),
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Num(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            Level::Num(v) => write!(f, "{v}"),
            Level::Text(s) => f.write_str(s),
        }
    }
}

impl Covariate {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            name: name.into(),
            values: CovValues::Numeric(values),
        }
    }

    pub fn text(name: impl Into<String>, values: Vec<String>) -> Self {
        Covariate {
            name: name.into(),
            values: CovValues::Text(values),
        }
    }

    /// Distinct observed levels in ascending order (numeric order for numeric
    /// columns, lexicographic for text columns).
    pub fn levels(&self) -> Vec<Level> {
        match &self.values {
            CovValues::Numeric(v) => {
                let mut lv = v.clone();
                lv.sort_by(|a, b| a.total_cmp(b));
                lv.dedup();
                lv.into_iter().map(Level::Num).collect()
            }
            CovValues::Text(v) => {
                let mut lv = v.clone();
                lv.sort();
                lv.dedup();
                lv.into_iter().map(Level::Text).collect()
            }
        }
    }

    /// Indicator of `level` for every row.
    pub fn indicator(&self, level: &Level) -> Vec<f64> {
        match (&self.values, level) {
            (CovValues::Numeric(v), Level::Num(l)) => v.iter().map(|x| if x == l { 1.0 } else { 0.0 }).collect(),
            (CovValues::Text(v), Level::Text(l)) => v.iter().map(|x| if x == l { 1.0 } else { 0.0 }).collect(),
            _ => vec![0.0; self.values.len()],
        }
    }

    /// True when the column is numeric and only takes values in {0, 1}.
    pub fn is_binary01(&self) -> bool {
        match &self.values {
            CovValues::Numeric(v) => v.iter().all(|&x| x == 0.0 || x == 1.0),
            CovValues::Text(_) => false,
        }
    }
}

/// A named dense matrix of covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateBlock {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl CovariateBlock {
    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(RdError::DimensionMismatch {
                what: "covariate block names",
                expected: values.ncols(),
                found: names.len(),
            });
        }
        Ok(CovariateBlock { names, values })
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> CovariateBlock {
        CovariateBlock {
            names: self.names.clone(),
            values: self.values.select_rows(rows),
        }
    }
}

/// Observed data for one analysis, after listwise deletion.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// Raw columns available to the heterogeneity expression.
    pub hetero: Vec<Covariate>,
    /// Raw efficiency covariates.
    pub efficiency: Vec<Covariate>,
    /// Cluster labels, `0..n_clusters`.
    pub clusters: Option<Vec<usize>>,
    pub rows_dropped: usize,
}

impl Sample {
    /// Build a sample from in-memory columns, dropping rows with a non-finite
    /// numeric value in any column.
    pub fn from_columns(
        y: Vec<f64>,
        x: Vec<f64>,
        hetero: Vec<Covariate>,
        efficiency: Vec<Covariate>,
        clusters: Option<Vec<usize>>,
    ) -> Result<Sample> {
        let n = y.len();
        let check = |what: &'static str, len: usize| {
            if len != n {
                Err(RdError::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                })
            } else {
                Ok(())
            }
        };
        check("score", x.len())?;
        for c in hetero.iter().chain(efficiency.iter()) {
            check("covariate column", c.values.len())?;
        }
        if let Some(cl) = &clusters {
            check("cluster labels", cl.len())?;
        }

        let keep: Vec<usize> = (0..n)
            .filter(|&i| {
                y[i].is_finite()
                    && x[i].is_finite()
                    && hetero.iter().chain(efficiency.iter()).all(|c| match &c.values {
                        CovValues::Numeric(v) => v[i].is_finite(),
                        CovValues::Text(_) => true,
                    })
            })
            .collect();
        if keep.is_empty() {
            return Err(RdError::EmptyAfterDeletion);
        }
        let full = Sample {
            y,
            x,
            hetero,
            efficiency,
            clusters,
            rows_dropped: 0,
        };
        if keep.len() == n {
            return Ok(full);
        }
        let mut s = full.subset(&keep);
        s.rows_dropped = n - keep.len();
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Restrict to `rows`; cluster labels are re-indexed densely.
    pub fn subset(&self, rows: &[usize]) -> Sample {
        let clusters = self.clusters.as_ref().map(|cl| {
            let picked: Vec<usize> = rows.iter().map(|&i| cl[i]).collect();
            relabel(&picked)
        });
        Sample {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x: rows.iter().map(|&i| self.x[i]).collect(),
            hetero: self
                .hetero
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: c.values.select(rows),
                })
                .collect(),
            efficiency: self
                .efficiency
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: c.values.select(rows),
                })
                .collect(),
            clusters,
            rows_dropped: self.rows_dropped,
        }
    }

    pub fn hetero_column(&self, name: &str) -> Option<&Covariate> {
        self.hetero.iter().find(|c| c.name == name)
    }

    /// Efficiency covariates as a numeric block. Text columns enter as
    /// indicators of every level but the first.
    pub fn efficiency_block(&self) -> Option<CovariateBlock> {
        if self.efficiency.is_empty() {
            return None;
        }
        let mut names = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for c in &self.efficiency {
            match &c.values {
                CovValues::Numeric(v) => {
                    names.push(c.name.clone());
                    cols.push(v.clone());
                }
                CovValues::Text(_) => {
                    for level in c.levels().iter().skip(1) {
                        names.push(format!("{level}.{}", c.name));
                        cols.push(c.indicator(level));
                    }
                }
            }
        }
        if cols.is_empty() {
            return None;
        }
        let n = self.n();
        let values = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        Some(CovariateBlock { names, values })
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    labels.iter().map(|l| map[l]).collect()
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub score: String,
    pub hetero: Vec<String>,
    pub efficiency: Vec<String>,
    pub cluster: Option<String>,
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

fn parse_finite(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a CSV file (header row required) and build a [`Sample`] from the
/// columns named in `roles`.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Sample> {
    let file = std::fs::File::open(path)?;
    read_csv(file, roles)
}

/// Same as [`load_csv`] for any reader.
pub fn read_csv<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| RdError::MissingColumn(name.to_string()))
    };

    let y_idx = index_of(&roles.outcome)?;
    let x_idx = index_of(&roles.score)?;
    let mut w_names: Vec<String> = Vec::new();
    for n in &roles.hetero {
        if !w_names.contains(n) {
            w_names.push(n.clone());
        }
    }
    let mut z_names: Vec<String> = Vec::new();
    for n in &roles.efficiency {
        if !z_names.contains(n) {
            z_names.push(n.clone());
        }
    }
    let w_idx: Vec<usize> = w_names.iter().map(|n| index_of(n)).collect::<Result<_>>()?;
    let z_idx: Vec<usize> = z_names.iter().map(|n| index_of(n)).collect::<Result<_>>()?;
    let c_idx = roles.cluster.as_deref().map(index_of).transpose()?;

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut w_raw: Vec<Vec<String>> = vec![Vec::new(); w_idx.len()];
    let mut z_raw: Vec<Vec<String>> = vec![Vec::new(); z_idx.len()];
    let mut c_raw: Vec<String> = Vec::new();
    let mut dropped = 0usize;

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let used = std::iter::once(y_idx)
            .chain(std::iter::once(x_idx))
            .chain(w_idx.iter().copied())
            .chain(z_idx.iter().copied())
            .chain(c_idx);
        if used.into_iter().any(|i| is_missing(field(i))) {
            dropped += 1;
            continue;
        }
        let xv = parse_finite(field(x_idx)).ok_or_else(|| RdError::NonNumericScore {
            row: row + 1,
            value: field(x_idx).to_string(),
        })?;
        let yv = parse_finite(field(y_idx)).ok_or_else(|| RdError::NonNumericColumn {
            column: roles.outcome.clone(),
            value: field(y_idx).to_string(),
        })?;
        x.push(xv);
        y.push(yv);
        for (k, &i) in w_idx.iter().enumerate() {
            w_raw[k].push(field(i).trim().to_string());
        }
        for (k, &i) in z_idx.iter().enumerate() {
            z_raw[k].push(field(i).trim().to_string());
        }
        if let Some(i) = c_idx {
            c_raw.push(field(i).trim().to_string());
        }
    }

    if y.is_empty() {
        return Err(RdError::EmptyAfterDeletion);
    }

    let to_cov = |name: &str, raw: Vec<String>| -> Covariate {
        let parsed: Option<Vec<f64>> = raw.iter().map(|s| parse_finite(s)).collect();
        match parsed {
            Some(v) => Covariate::numeric(name, v),
            None => Covariate::text(name, raw),
        }
    };
    let hetero = w_names.iter().zip(w_raw).map(|(n, raw)| to_cov(n, raw)).collect();
    let efficiency = z_names.iter().zip(z_raw).map(|(n, raw)| to_cov(n, raw)).collect();
    let clusters = c_idx.map(|_| {
        let mut uniq: Vec<&String> = c_raw.iter().collect();
        uniq.sort();
        uniq.dedup();
        let map: BTreeMap<&String, usize> = uniq.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        c_raw.iter().map(|s| map[s]).collect()
    });

    Ok(Sample {
        y,
        x,
        hetero,
        efficiency,
        clusters,
        rows_dropped: dropped,
    })
}

/// Sharp assignment: treated iff the score is at or above the cutoff.
pub fn build_treatment(x: &[f64], cutoff: f64) -> Vec<f64> {
    x.iter().map(|&xi| if xi >= cutoff { 1.0 } else { 0.0 }).collect()
}
