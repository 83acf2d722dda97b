//! Heterogeneity covariate expressions.
//!
//! The grammar is a small subset of factor-variable notation:
//!
//! ```text
//! expr  := term (WS term)*
//! term  := atom ('#' atom)*        product only
//!        | atom ('##' atom)*       full factorial: every main effect and product
//! atom  := 'i.' NAME | 'c.' NAME | NAME
//! ```
//!
//! A bare `NAME` is a factor when the column is text or only takes the values
//! 0 and 1, and continuous otherwise.
//!
//! Expansion has two codings. [`Coding::Full`] produces one indicator per
//! observed level and is what the subgroup classification inspects;
//! [`Coding::Baseline`] omits the first level of every factor and is used for
//! generic (functional-coefficient) designs, where the treatment intercept
//! plays the role of the baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovValues, Covariate, CovariateBlock, Level, Sample};
use crate::error::{RdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Factor,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub column: String,
    pub kind: TermKind,
}

/// A product of one or more atoms; `atoms.len()` is the interaction order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub atoms: Vec<Atom>,
}

impl Term {
    pub fn order(&self) -> usize {
        self.atoms.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coding {
    Full,
    Baseline,
}

/// A parsed heterogeneity expression, bound to the columns of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpec {
    pub expr: String,
    pub terms: Vec<Term>,
    /// Column names under [`Coding::Full`].
    pub expanded_names: Vec<String>,
}

/// Column names referenced by an expression, without binding to data.
pub fn referenced_columns(expr: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for token in expr.split_whitespace() {
        let sep = if token.contains("##") { "##" } else { "#" };
        for part in token.split(sep) {
            let name = part
                .strip_prefix("i.")
                .or_else(|| part.strip_prefix("c."))
                .unwrap_or(part);
            if name.is_empty() || name.contains('#') {
                return Err(RdError::MalformedExpression(format!("cannot parse term `{token}`")));
            }
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        }
    }
    if out.is_empty() {
        return Err(RdError::MalformedExpression("empty expression".into()));
    }
    Ok(out)
}

fn parse_atom(part: &str, sample: &Sample, token: &str) -> Result<Atom> {
    let (name, explicit) = if let Some(n) = part.strip_prefix("i.") {
        (n, Some(TermKind::Factor))
    } else if let Some(n) = part.strip_prefix("c.") {
        (n, Some(TermKind::Continuous))
    } else {
        (part, None)
    };
    if name.is_empty() || name.contains('#') {
        return Err(RdError::MalformedExpression(format!("cannot parse term `{token}`")));
    }
    let col = sample
        .hetero_column(name)
        .ok_or_else(|| RdError::UnknownColumn(name.to_string()))?;
    let kind = match explicit {
        Some(TermKind::Continuous) => {
            if matches!(col.values, CovValues::Text(_)) {
                return Err(RdError::MalformedExpression(format!(
                    "`c.{name}` requires a numeric column"
                )));
            }
            TermKind::Continuous
        }
        Some(TermKind::Factor) => TermKind::Factor,
        None => match col.values {
            CovValues::Text(_) => TermKind::Factor,
            CovValues::Numeric(_) if col.is_binary01() => TermKind::Factor,
            CovValues::Numeric(_) => TermKind::Continuous,
        },
    };
    Ok(Atom {
        column: name.to_string(),
        kind,
    })
}

/// Non-empty subsets of `0..k`, ordered by size and then lexicographically.
fn factorial_subsets(k: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << k))
        .map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

/// Parse `expr` against the heterogeneity columns of `sample`.
pub fn parse_covariate_spec(expr: &str, sample: &Sample) -> Result<CovariateSpec> {
    let mut terms: Vec<Term> = Vec::new();
    for token in expr.split_whitespace() {
        let (parts, full): (Vec<&str>, bool) = if token.contains("##") {
            (token.split("##").collect(), true)
        } else {
            (token.split('#').collect(), false)
        };
        let atoms: Vec<Atom> = parts
            .iter()
            .map(|p| parse_atom(p, sample, token))
            .collect::<Result<_>>()?;
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].iter().any(|b| b.column == a.column) {
                return Err(RdError::MalformedExpression(format!(
                    "column `{}` repeated within `{token}`",
                    a.column
                )));
            }
        }
        let new_terms: Vec<Term> = if full {
            factorial_subsets(atoms.len())
                .into_iter()
                .map(|idx| Term {
                    atoms: idx.into_iter().map(|i| atoms[i].clone()).collect(),
                })
                .collect()
        } else {
            vec![Term { atoms }]
        };
        for t in new_terms {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
    }
    if terms.is_empty() {
        return Err(RdError::MalformedExpression("empty expression".into()));
    }
    let mut spec = CovariateSpec {
        expr: expr.trim().to_string(),
        terms,
        expanded_names: Vec::new(),
    };
    spec.expanded_names = spec.expand(sample, Coding::Full)?.names;
    Ok(spec)
}

impl CovariateSpec {
    /// Expand every term into numeric columns.
    pub fn expand(&self, sample: &Sample, coding: Coding) -> Result<CovariateBlock> {
        let n = sample.n();
        let mut names: Vec<String> = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for term in &self.terms {
            // start with the empty product
            let mut partial: Vec<(Vec<String>, Vec<f64>)> = vec![(Vec::new(), vec![1.0; n])];
            for atom in &term.atoms {
                let col = sample
                    .hetero_column(&atom.column)
                    .ok_or_else(|| RdError::UnknownColumn(atom.column.clone()))?;
                let pieces = atom_columns(col, atom.kind, coding)?;
                let mut next = Vec::with_capacity(partial.len() * pieces.len());
                for (pname, pvals) in &partial {
                    for (aname, avals) in &pieces {
                        let mut nm = pname.clone();
                        nm.push(aname.clone());
                        let v = pvals.iter().zip(avals).map(|(a, b)| a * b).collect();
                        next.push((nm, v));
                    }
                }
                partial = next;
            }
            for (nm, v) in partial {
                let name = nm.join("#");
                if !names.contains(&name) {
                    names.push(name);
                    cols.push(v);
                }
            }
        }
        let values = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        CovariateBlock::new(names, values)
    }
}

fn atom_columns(col: &Covariate, kind: TermKind, coding: Coding) -> Result<Vec<(String, Vec<f64>)>> {
    match kind {
        TermKind::Continuous => match &col.values {
            CovValues::Numeric(v) => Ok(vec![(col.name.clone(), v.clone())]),
            CovValues::Text(_) => Err(RdError::MalformedExpression(format!("`{}` is not numeric", col.name))),
        },
        TermKind::Factor => {
            let levels: Vec<Level> = col.levels();
            let skip = match coding {
                Coding::Full => 0,
                Coding::Baseline => 1,
            };
            Ok(levels
                .iter()
                .skip(skip)
                .map(|l| (format!("{l}.{}", col.name), col.indicator(l)))
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeteroMode {
    Subgroup,
    Generic,
}

/// Label of the residual group materialised when some rows belong to no
/// indicator.
pub const OMITTED_GROUP: &str = "(omitted)";

/// Expanded heterogeneity covariates together with their classification.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityDesign {
    pub mode: HeteroMode,
    /// Subgroup: one indicator column per group (partition of the rows).
    /// Generic: baseline-coded covariate columns.
    pub w: CovariateBlock,
    pub group_labels: Vec<String>,
    /// Group of every row (Subgroup mode only).
    pub group_index: Vec<usize>,
}

impl HeterogeneityDesign {
    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    /// Rows belonging to each group, in group order.
    pub fn group_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.group_labels.len()];
        for (i, &g) in self.group_index.iter().enumerate() {
            rows[g].push(i);
        }
        rows
    }
}

/// True when every entry is 0 or 1 and no row has more than one 1.
pub fn is_binary_orthogonal(w: &DMatrix<f64>) -> bool {
    w.iter().all(|&v| v == 0.0 || v == 1.0) && w.row_iter().all(|r| r.sum() <= 1.0)
}

/// Decide between subgroup and generic analysis for an expression.
pub fn classify_heterogeneity(spec: &CovariateSpec, sample: &Sample) -> Result<HeterogeneityDesign> {
    let full = spec.expand(sample, Coding::Full)?;
    if is_binary_orthogonal(&full.values) {
        Ok(subgroup_design(&full))
    } else {
        let w = spec.expand(sample, Coding::Baseline)?;
        Ok(HeterogeneityDesign {
            mode: HeteroMode::Generic,
            w,
            group_labels: Vec::new(),
            group_index: Vec::new(),
        })
    }
}

/// Build the subgroup partition from a binary-orthogonal block. Empty
/// indicators are discarded; rows with no indicator form the omitted group.
pub fn subgroup_design(full: &CovariateBlock) -> HeterogeneityDesign {
    let n = full.nrows();
    let kept: Vec<usize> = (0..full.ncols())
        .filter(|&j| full.values.column(j).iter().any(|&v| v == 1.0))
        .collect();
    let mut labels: Vec<String> = kept.iter().map(|&j| full.names[j].clone()).collect();
    let mut group_index = vec![usize::MAX; n];
    for (g, &j) in kept.iter().enumerate() {
        for (i, slot) in group_index.iter_mut().enumerate() {
            if full.values[(i, j)] == 1.0 {
                *slot = g;
            }
        }
    }
    if group_index.contains(&usize::MAX) {
        let omitted = labels.len();
        labels.push(OMITTED_GROUP.to_string());
        for g in group_index.iter_mut().filter(|g| **g == usize::MAX) {
            *g = omitted;
        }
    }
    let values = DMatrix::from_fn(n, labels.len(), |i, g| if group_index[i] == g { 1.0 } else { 0.0 });
    HeterogeneityDesign {
        mode: HeteroMode::Subgroup,
        w: CovariateBlock {
            names: labels.clone(),
            values,
        },
        group_labels: labels,
        group_index,
    }
}
