//! Linear combinations of estimated effects and joint Wald tests.
//!
//! Combination expressions are sums of signed terms over row labels:
//! `G1 - G0`, `0.5*A + 0.5*B`, `-2*T#w`. A bare label has coefficient one.
//! Labels are matched longest-first against the labels of the result, so
//! labels containing `#`, `.` or parentheses need no quoting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{RdError, Result};
use crate::estimator::{Inference, RdResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCombo {
    pub expr: String,
    pub terms: Vec<(f64, String)>,
}

impl LinearCombo {
    /// Coefficient vector aligned with `labels`.
    pub fn vector(&self, labels: &[String]) -> Result<DVector<f64>> {
        let mut c = DVector::zeros(labels.len());
        for (coef, label) in &self.terms {
            let j = labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| RdError::UnknownLabel {
                    label: label.clone(),
                    available: labels.to_vec(),
                })?;
            c[j] += coef;
        }
        Ok(c)
    }
}

fn skip_ws(s: &str, mut i: usize) -> usize {
    let b = s.as_bytes();
    while i < b.len() && b[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

fn longest_label<'a>(rest: &str, labels: &'a [String]) -> Option<&'a String> {
    labels
        .iter()
        .filter(|l| !l.is_empty() && rest.starts_with(l.as_str()))
        .max_by_key(|l| l.len())
}

/// Leading number followed by `*`, e.g. `0.5*`.
fn coefficient_prefix(rest: &str) -> Option<(f64, usize)> {
    let star = rest.find('*')?;
    let num = rest[..star].trim();
    let v: f64 = num.parse().ok()?;
    Some((v, star + 1))
}

fn bad_term(expr: &str, rest: &str, labels: &[String]) -> RdError {
    let token: String = rest
        .chars()
        .take_while(|c| !c.is_whitespace() && *c != '+' && *c != '-')
        .collect();
    if token.is_empty() {
        RdError::MalformedCombo(expr.to_string())
    } else {
        RdError::UnknownLabel {
            label: token,
            available: labels.to_vec(),
        }
    }
}

/// Parse `expr` against the labels of a result.
pub fn parse_combo(expr: &str, labels: &[String]) -> Result<LinearCombo> {
    let mut terms = Vec::new();
    let mut i = skip_ws(expr, 0);
    let mut first = true;
    while i < expr.len() {
        let mut sign = 1.0;
        // a label may itself start with a sign, e.g. a level of -1
        let direct = if first { longest_label(&expr[i..], labels) } else { None };
        if direct.is_none() {
            match expr.as_bytes()[i] {
                b'+' => i += 1,
                b'-' => {
                    sign = -1.0;
                    i += 1
                }
                _ if !first => return Err(RdError::MalformedCombo(expr.to_string())),
                _ => {}
            }
            i = skip_ws(expr, i);
        }
        first = false;
        let mut coef = 1.0;
        if longest_label(&expr[i..], labels).is_none() {
            if let Some((v, used)) = coefficient_prefix(&expr[i..]) {
                coef = v;
                i = skip_ws(expr, i + used);
            }
        }
        let label = longest_label(&expr[i..], labels).ok_or_else(|| bad_term(expr, &expr[i..], labels))?;
        i = skip_ws(expr, i + label.len());
        terms.push((sign * coef, label.clone()));
    }
    if terms.is_empty() || terms.iter().all(|(c, _)| *c == 0.0) {
        return Err(RdError::EmptyCombo);
    }
    Ok(LinearCombo {
        expr: expr.trim().to_string(),
        terms,
    })
}

/// Estimate and bias-corrected inference for `c'θ`.
pub fn lincom(result: &RdResult, combo: &LinearCombo) -> Result<Inference> {
    let c = combo.vector(&result.labels())?;
    Ok(Inference::from_contrast(
        &result.theta(),
        &result.v_matrix(),
        &c,
        result.config.level,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    /// Indices of combos dropped as linearly dependent on earlier ones.
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Joint test of `Rθ = 0` with one row of `R` per combo.
pub fn wald_test(result: &RdResult, combos: &[LinearCombo]) -> Result<WaldTest> {
    if combos.is_empty() {
        return Err(RdError::EmptyCombo);
    }
    let labels = result.labels();
    let rows = combos.iter().map(|c| c.vector(&labels)).collect::<Result<Vec<_>>>()?;

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, r) in rows.iter().enumerate() {
        let mut v = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj = v.dot(b);
                v -= b * proj;
            }
        }
        if v.norm() <= 1e-10 * r.norm().max(f64::MIN_POSITIVE) {
            dropped.push(k);
        } else {
            basis.push(v.normalize());
            kept.push(k);
        }
    }
    let warnings = dropped
        .iter()
        .map(|&k| {
            format!(
                "combo `{}` is linearly dependent on earlier combos and was dropped",
                combos[k].expr
            )
        })
        .collect();

    let df = kept.len();
    let r = DMatrix::from_fn(df, labels.len(), |i, j| rows[kept[i]][j]);
    let rt = &r * result.theta();
    let m = &r * result.v_matrix() * r.transpose();
    let chol = m.cholesky().ok_or(RdError::SingularContrastCovariance)?;
    let chi2 = rt.dot(&chol.solve(&rt));
    let p = ChiSquared::new(df as f64)
        .map_err(|e| RdError::InvalidConfig(e.to_string()))?
        .sf(chi2);
    Ok(WaldTest {
        chi2,
        df,
        p,
        dropped,
        warnings,
    })
}
