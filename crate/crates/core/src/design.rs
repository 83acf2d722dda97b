//! Regression designs for local polynomial RD fits with covariate
//! interactions.
//!
//! Column blocks always appear in the order
//!
//! ```text
//! [ r_p(x) | T·r_p(x) | r_s(x)⊗W | T·(r_s(x)⊗W) | Z | Z⊗W ]
//! ```
//!
//! where the Kronecker products run over the basis index first and the `W`
//! column second. The score is centred at the cutoff before the basis is
//! formed, so the intercept of the treated block is the jump at the cutoff.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CovariateBlock;
use crate::error::{RdError, Result};

/// `(1, u, …, u^p)`.
pub fn poly_basis(u: f64, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p + 1);
    let mut v = 1.0;
    for _ in 0..=p {
        out.push(v);
        v *= u;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Control,
    Treated,
    Hetero,
    TreatedHetero,
    Efficiency,
}

/// How the heterogeneity block is coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WCoding {
    /// `W` enters next to the full polynomial blocks.
    Standard,
    /// `W` holds a complete set of group indicators; polynomial terms already
    /// spanned by the group interactions are left out, so each
    /// `T·W` coefficient is a group effect.
    CellMeans,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: DMatrix<f64>,
    pub names: Vec<String>,
    pub blocks: Vec<Block>,
    pub dropped: Vec<DroppedColumn>,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.columns.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.columns.nrows()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            columns: self.columns.select_rows(rows),
            names: self.names.clone(),
            blocks: self.blocks.clone(),
            dropped: self.dropped.clone(),
        }
    }
}

fn power_name(j: usize) -> String {
    match j {
        0 => String::new(),
        1 => "x".to_string(),
        _ => format!("x^{j}"),
    }
}

fn join(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("#")
}

/// Name of the treated polynomial coefficient of order `j`.
pub fn treated_name(j: usize) -> String {
    let pw = power_name(j);
    join(&["T", &pw])
}

/// Name of the control polynomial coefficient of order `j`.
pub fn control_name(j: usize) -> String {
    if j == 0 {
        "_cons".to_string()
    } else {
        power_name(j)
    }
}

/// Name of the `T·x^j·w` coefficient.
pub fn treated_hetero_name(j: usize, w: &str) -> String {
    let pw = power_name(j);
    join(&["T", &pw, w])
}

/// Name of the `x^j·w` coefficient.
pub fn hetero_name(j: usize, w: &str) -> String {
    let pw = power_name(j);
    join(&[&pw, w])
}

/// Assemble the design. `x` must already be centred at the cutoff.
pub fn build_design(
    x: &[f64],
    t: &[f64],
    w: Option<&CovariateBlock>,
    z: Option<&CovariateBlock>,
    p: usize,
    s: usize,
    coding: WCoding,
) -> Result<DesignMatrix> {
    let n = x.len();
    let check = |what: &'static str, found: usize| {
        if found != n {
            Err(RdError::DimensionMismatch {
                what,
                expected: n,
                found,
            })
        } else {
            Ok(())
        }
    };
    check("treatment vector", t.len())?;
    if let Some(w) = w {
        check("heterogeneity block", w.nrows())?;
    }
    if let Some(z) = z {
        check("efficiency block", z.nrows())?;
    }
    let cell_means = coding == WCoding::CellMeans && w.is_some();

    let mut names = Vec::new();
    let mut blocks = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let pow = |j: usize| DVector::from_iterator(n, x.iter().map(|&v| v.powi(j as i32)));
    let tvec = DVector::from_column_slice(t);

    let poly_range: Vec<usize> = if cell_means {
        (s + 1..=p).collect()
    } else {
        (0..=p).collect()
    };
    for &j in &poly_range {
        names.push(control_name(j));
        blocks.push(Block::Control);
        cols.push(pow(j));
    }
    for &j in &poly_range {
        names.push(treated_name(j));
        blocks.push(Block::Treated);
        cols.push(pow(j).component_mul(&tvec));
    }
    if let Some(w) = w {
        let mut het = Vec::new();
        for j in 0..=s {
            let pj = pow(j);
            for (k, wn) in w.names.iter().enumerate() {
                het.push((j, wn, pj.component_mul(&w.values.column(k))));
            }
        }
        for (j, wn, c) in &het {
            names.push(hetero_name(*j, wn));
            blocks.push(Block::Hetero);
            cols.push(c.clone());
        }
        for (j, wn, c) in &het {
            names.push(treated_hetero_name(*j, wn));
            blocks.push(Block::TreatedHetero);
            cols.push(c.component_mul(&tvec));
        }
    }
    if let Some(z) = z {
        if !cell_means {
            for (m, zn) in z.names.iter().enumerate() {
                names.push(zn.clone());
                blocks.push(Block::Efficiency);
                cols.push(z.values.column(m).into_owned());
            }
        }
        if let Some(w) = w {
            for (m, zn) in z.names.iter().enumerate() {
                for (k, wn) in w.names.iter().enumerate() {
                    names.push(format!("{zn}#{wn}"));
                    blocks.push(Block::Efficiency);
                    cols.push(z.values.column(m).component_mul(&w.values.column(k)));
                }
            }
        }
    }

    let columns = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Ok(DesignMatrix {
        columns,
        names,
        blocks,
        dropped: Vec::new(),
    })
}

/// Greedy left-to-right elimination of columns that are (numerically) in the
/// span of the columns kept before them, measured in the `√weight` metric.
pub fn drop_collinear(design: &DesignMatrix, weights: &[f64], tol: f64) -> Result<DesignMatrix> {
    if !(tol > 0.0) {
        return Err(RdError::InvalidConfig(format!(
            "collinearity tolerance must be positive, got {tol}"
        )));
    }
    if weights.len() != design.nrows() {
        return Err(RdError::DimensionMismatch {
            what: "weights",
            expected: design.nrows(),
            found: weights.len(),
        });
    }
    let sw = DVector::from_iterator(weights.len(), weights.iter().map(|w| w.max(0.0).sqrt()));
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    let mut dropped = design.dropped.clone();
    for j in 0..design.ncols() {
        let mut v = design.columns.column(j).component_mul(&sw);
        let norm0 = v.norm();
        if norm0 == 0.0 {
            dropped.push(DroppedColumn {
                name: design.names[j].clone(),
                reason: "zero on the effective sample".into(),
            });
            continue;
        }
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= tol * norm0 {
            dropped.push(DroppedColumn {
                name: design.names[j].clone(),
                reason: "collinear with earlier columns".into(),
            });
            continue;
        }
        basis.push(v / norm);
        keep.push(j);
    }
    if keep.is_empty() {
        return Err(RdError::AllColumnsDropped);
    }
    Ok(DesignMatrix {
        columns: design.columns.select_columns(&keep),
        names: keep.iter().map(|&j| design.names[j].clone()).collect(),
        blocks: keep.iter().map(|&j| design.blocks[j]).collect(),
        dropped,
    })
}
