//! Weighted least squares with leverage and sandwich covariance estimators.
//!
//! The fit works on the rows with positive weight (the effective sample).
//! Coefficients come from a Householder QR of the `√w`-scaled design. Hat
//! diagonals and the final bread products use LU solves against the Gram
//! matrix after an exact power-of-two rescaling of its columns.
//!
//! Sandwich covariances have the form `B · M · B` with bread
//! `B = (D'WD)^{-1}` and meat `M = Σ s_i s_i'`, where the per-row score is
//! `s_i = w_i · d_i · ẽ_i` and `ẽ_i` is the residual adjusted according to the
//! chosen [`VceKind`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{RdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub beta: DVector<f64>,
    /// `y - Dβ` on the effective sample.
    pub residuals: DVector<f64>,
    /// Weighted hat diagonals `w_i d_i'(D'WD)^{-1} d_i` on the effective sample.
    pub leverage: DVector<f64>,
    /// Low-order parts of the hat diagonals: `leverage + leverage_tail` carries
    /// roughly twice working precision, which keeps `1 - h` accurate near one.
    pub leverage_tail: DVector<f64>,
    /// `(D'WD)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
    pub n_eff: usize,
    pub k: usize,
    /// Row indices (into the design) of the effective sample.
    pub support: Vec<usize>,
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(RdError::DimensionMismatch {
            what: "weights",
            expected: n,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(RdError::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Weighted least squares of `y` on the design columns.
pub fn wls_fit(design: &DesignMatrix, weights: &[f64], y: &[f64]) -> Result<WlsFit> {
    let n = design.nrows();
    check_weights(weights, n)?;
    if y.len() != n {
        return Err(RdError::DimensionMismatch {
            what: "outcome",
            expected: n,
            found: y.len(),
        });
    }
    let support: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    let n_eff = support.len();
    let k = design.ncols();
    if k == 0 {
        return Err(RdError::AllColumnsDropped);
    }
    if n_eff < k {
        return Err(RdError::InsufficientObservations(format!(
            "{n_eff} positive-weight observations for {k} coefficients"
        )));
    }

    let sw: Vec<f64> = support.iter().map(|&i| weights[i].sqrt()).collect();
    let xs = DMatrix::from_fn(n_eff, k, |r, c| sw[r] * design.columns[(support[r], c)]);
    let ys = DVector::from_iterator(n_eff, support.iter().zip(&sw).map(|(&i, s)| s * y[i]));

    let qr = xs.qr();
    let q = qr.q();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if diag_max == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-13 * diag_max) {
        return Err(RdError::SingularDesign);
    }
    let qty = q.tr_mul(&ys);
    let beta = r.solve_upper_triangular(&qty).ok_or(RdError::SingularDesign)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(RdError::SingularDesign)?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let (leverage, leverage_tail) = gram_leverage(design, &support, weights).unwrap_or_else(|| {
        (
            DVector::from_iterator(n_eff, q.row_iter().map(|row| row.norm_squared())),
            DVector::zeros(n_eff),
        )
    });
    let residuals = DVector::from_iterator(
        n_eff,
        support
            .iter()
            .map(|&i| y[i] - design.columns.row(i).transpose().dot(&beta)),
    );

    Ok(WlsFit {
        beta,
        residuals,
        leverage,
        leverage_tail,
        xtx_inv,
        n_eff,
        k,
        support,
    })
}

/// Residual adjustment used in the sandwich meat.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VceKind {
    Hc0,
    Hc1,
    Hc2,
    #[default]
    Hc3,
    /// Cluster-robust with the usual `G/(G-1)·(n-1)/(n-k)` scaling.
    ClusterHc1 {
        column: String,
    },
    /// Cluster-robust with the Bell–McCaffrey `(I - H_gg)^{-1/2}` adjustment.
    ClusterHc2 {
        column: String,
    },
}

impl VceKind {
    pub fn cluster_column(&self) -> Option<&str> {
        match self {
            VceKind::ClusterHc1 { column } | VceKind::ClusterHc2 { column } => Some(column),
            _ => None,
        }
    }

    pub fn is_cluster(&self) -> bool {
        self.cluster_column().is_some()
    }

    /// The command-line spelling, e.g. `hc3` or `cluster:district`.
    pub fn spec(&self) -> String {
        match self {
            VceKind::Hc0 => "hc0".into(),
            VceKind::Hc1 => "hc1".into(),
            VceKind::Hc2 => "hc2".into(),
            VceKind::Hc3 => "hc3".into(),
            VceKind::ClusterHc1 { column } => format!("cluster:{column}"),
            VceKind::ClusterHc2 { column } => format!("cluster_hc2:{column}"),
        }
    }
}

impl fmt::Display for VceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VceKind::Hc0 => f.write_str("HC0"),
            VceKind::Hc1 => f.write_str("HC1"),
            VceKind::Hc2 => f.write_str("HC2"),
            VceKind::Hc3 => f.write_str("HC3"),
            VceKind::ClusterHc1 { column } => write!(f, "cluster HC1 ({column})"),
            VceKind::ClusterHc2 { column } => write!(f, "cluster HC2 ({column})"),
        }
    }
}

impl FromStr for VceKind {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        let named = |prefix: &str| -> Option<Result<String>> {
            lower.strip_prefix(prefix).map(|_| {
                let col = s[prefix.len()..].trim();
                if col.is_empty() {
                    Err(RdError::InvalidConfig(format!("`{s}` needs a cluster column name")))
                } else {
                    Ok(col.to_string())
                }
            })
        };
        if let Some(col) = named("cluster_hc2:") {
            return Ok(VceKind::ClusterHc2 { column: col? });
        }
        if let Some(col) = named("cluster:") {
            return Ok(VceKind::ClusterHc1 { column: col? });
        }
        match lower.as_str() {
            "hc0" => Ok(VceKind::Hc0),
            "hc1" => Ok(VceKind::Hc1),
            "hc2" => Ok(VceKind::Hc2),
            "hc3" => Ok(VceKind::Hc3),
            _ => Err(RdError::InvalidConfig(format!(
                "unknown variance estimator `{s}` (expected hc0|hc1|hc2|hc3|cluster:NAME|cluster_hc2:NAME)"
            ))),
        }
    }
}

impl TryFrom<String> for VceKind {
    type Error = RdError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VceKind> for String {
    fn from(v: VceKind) -> String {
        v.spec()
    }
}

/// A covariance matrix plus any warnings raised while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Vcov {
    pub matrix: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl WlsFit {
    /// Residual after leverage correction, `e_r / (1 - h_r)^power` for `power`
    /// 0.5 or 1, with `1 - h_r` and the division carried in double-double
    /// arithmetic. A unit with leverage one gets zero and contributes nothing.
    pub fn adjusted_residual(&self, r: usize, power: f64) -> f64 {
        let (c, c_lo) = two_sum(1.0, -self.leverage[r]);
        let (mut d, mut d_lo) = two_sum(c, c_lo - self.leverage_tail[r]);
        if d <= 1e-12 {
            return 0.0;
        }
        if power != 1.0 {
            // sqrt(d + d_lo) to double-double precision
            let s = d.sqrt();
            let corr = (-s.mul_add(s, -d) + d_lo) / (2.0 * s);
            (d, d_lo) = two_sum(s, corr);
        }
        let e = self.residuals[r];
        let q = e / d;
        let rem = (-q).mul_add(d, e) - q * d_lo;
        q + rem / d
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Compensated `Σ a_i b_i` as an unevaluated sum `hi + lo`.
fn dot2(pairs: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (a, b) in pairs {
        let p = a * b;
        let p_err = a.mul_add(b, -p);
        let (s, s_err) = two_sum(hi, p);
        hi = s;
        lo += p_err + s_err;
    }
    two_sum(hi, lo)
}

/// Sandwich covariance of the coefficients of `fit`.
pub fn sandwich_vcov(
    fit: &WlsFit,
    design: &DesignMatrix,
    weights: &[f64],
    vce: &VceKind,
    clusters: Option<&[usize]>,
) -> Result<Vcov> {
    check_weights(weights, design.nrows())?;
    let n = fit.n_eff;
    let k = fit.k;
    let rows = &fit.support;
    let bread = &fit.xtx_inv;
    let mut warnings = Vec::new();

    let meat = match vce {
        VceKind::Hc0 | VceKind::Hc1 | VceKind::Hc2 | VceKind::Hc3 => {
            if matches!(vce, VceKind::Hc1) && n <= k {
                return Err(RdError::InsufficientObservations(format!(
                    "HC1 needs more than {k} observations, have {n}"
                )));
            }
            let hc1 = (n as f64 / (n - k).max(1) as f64).sqrt();
            let scores = DMatrix::from_fn(n, k, |r, c| {
                let i = rows[r];
                let e = fit.residuals[r];
                let adj = match vce {
                    VceKind::Hc0 => e,
                    VceKind::Hc1 => e * hc1,
                    VceKind::Hc2 => fit.adjusted_residual(r, 0.5),
                    _ => fit.adjusted_residual(r, 1.0),
                };
                weights[i] * design.columns[(i, c)] * adj
            });
            scores.tr_mul(&scores)
        }
        VceKind::ClusterHc1 { .. } | VceKind::ClusterHc2 { .. } => {
            let labels = clusters.ok_or(RdError::MissingClusters)?;
            if labels.len() != design.nrows() {
                return Err(RdError::DimensionMismatch {
                    what: "cluster labels",
                    expected: design.nrows(),
                    found: labels.len(),
                });
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (r, &i) in rows.iter().enumerate() {
                groups.entry(labels[i]).or_default().push(r);
            }
            let g = groups.len();
            if g < 2 {
                return Err(RdError::TooFewClusters(g));
            }
            if n <= k {
                return Err(RdError::InsufficientObservations(format!(
                    "cluster-robust variance needs more than {k} observations, have {n}"
                )));
            }
            let factor = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64);
            let mut meat = DMatrix::zeros(k, k);
            let mut fallbacks = 0usize;
            for members in groups.values() {
                let u = match vce {
                    VceKind::ClusterHc2 { .. } => match bell_mccaffrey_score(fit, design, weights, members) {
                        Some(u) => u,
                        None => {
                            fallbacks += 1;
                            cluster_score(fit, design, weights, members) * factor.sqrt()
                        }
                    },
                    _ => cluster_score(fit, design, weights, members) * factor.sqrt(),
                };
                meat += &u * u.transpose();
            }
            if fallbacks > 0 {
                warnings.push(format!(
                    "{fallbacks} cluster block(s) had a singular (I - H_gg); used the HC1 cluster score for them"
                ));
            }
            meat
        }
    };

    let mut matrix = apply_bread(fit, design, weights, &meat).unwrap_or_else(|| bread * &meat * bread);
    // symmetrize away rounding
    matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(Vcov { matrix, warnings })
}

/// `G⁻¹ M G⁻¹` with `G = D'WD`, by LU solves instead of an explicit inverse.
/// Columns are first rescaled by powers of two, which is exact, so that `G`
/// is close to unit diagonal.
fn apply_bread(fit: &WlsFit, design: &DesignMatrix, weights: &[f64], meat: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram = weighted_gram(design, &fit.support, weights);
    let s = equilibration(&gram);
    let lu = (&s * gram * &s).lu();
    let left = lu.solve(&(&s * meat * &s))?;
    let v = lu.solve(&left.transpose())?;
    let v = &s * v * &s;
    v.iter().all(|x| x.is_finite()).then_some(v)
}

/// Power-of-two column scaling that brings `diag(G)` close to one. Exact in
/// floating point.
fn equilibration(gram: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        gram.nrows(),
        (0..gram.nrows()).map(|j| {
            let g = gram[(j, j)];
            if g > 0.0 {
                2f64.powi(-(g.sqrt().log2().round() as i32))
            } else {
                1.0
            }
        }),
    ))
}

fn weighted_gram(design: &DesignMatrix, support: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let k = design.ncols();
    let mut gram = DMatrix::zeros(k, k);
    for &i in support {
        let d = design.columns.row(i);
        gram += d.transpose() * d * weights[i];
    }
    gram
}

/// Hat diagonals from the equilibrated Gram matrix, refined once with a
/// compensated residual so the result is accurate beyond working precision.
fn gram_leverage(design: &DesignMatrix, support: &[usize], weights: &[f64]) -> Option<(DVector<f64>, DVector<f64>)> {
    let k = design.ncols();
    let m = support.len();
    let gram = weighted_gram(design, support, weights);
    let s = equilibration(&gram);
    let gs = &s * gram * &s;
    let lu = gs.clone().lu();
    let ds = DMatrix::from_fn(k, m, |j, r| s[(j, j)] * design.columns[(support[r], j)]);
    let z = lu.solve(&ds)?;
    let resid = DMatrix::from_fn(k, m, |j, r| {
        let (hi, lo) = dot2((0..k).map(|l| (-gs[(j, l)], z[(l, r)])).chain([(ds[(j, r)], 1.0)]));
        hi + lo
    });
    let delta = lu.solve(&resid)?;
    let mut h = DVector::zeros(m);
    let mut tail = DVector::zeros(m);
    for r in 0..m {
        let w = weights[support[r]];
        let (hi, lo) = dot2((0..k).flat_map(|j| [(ds[(j, r)], z[(j, r)]), (ds[(j, r)], delta[(j, r)])]));
        let p = w * hi;
        let (a, b) = two_sum(p, w.mul_add(hi, -p) + w * lo);
        h[r] = a;
        tail[r] = b;
    }
    (h.iter().all(|v| v.is_finite() && *v >= -1e-12) && tail.iter().all(|v| v.is_finite())).then_some((h, tail))
}

/// `Σ_{i∈g} w_i d_i e_i`.
fn cluster_score(fit: &WlsFit, design: &DesignMatrix, weights: &[f64], members: &[usize]) -> DVector<f64> {
    let mut u = DVector::zeros(fit.k);
    for &r in members {
        let i = fit.support[r];
        let s = weights[i] * fit.residuals[r];
        u.axpy(s, &design.columns.row(i).transpose(), 1.0);
    }
    u
}

/// Score of one cluster with residuals adjusted by `(I - H_gg)^{-1/2}`;
/// `None` when the block is not positive definite.
fn bell_mccaffrey_score(
    fit: &WlsFit,
    design: &DesignMatrix,
    weights: &[f64],
    members: &[usize],
) -> Option<DVector<f64>> {
    let m = members.len();
    let k = fit.k;
    let xg = DMatrix::from_fn(m, k, |a, c| {
        let i = fit.support[members[a]];
        weights[i].sqrt() * design.columns[(i, c)]
    });
    let eg = DVector::from_iterator(
        m,
        members
            .iter()
            .map(|&r| weights[fit.support[r]].sqrt() * fit.residuals[r]),
    );
    let h = &xg * &fit.xtx_inv * xg.transpose();
    let a = DMatrix::identity(m, m) - h;
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.iter().any(|&l| l <= 1e-10) {
        return None;
    }
    let inv_sqrt = DVector::from_iterator(m, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let v = &eig.eigenvectors;
    let adj = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose() * eg;
    Some(xg.tr_mul(&adj))
}
