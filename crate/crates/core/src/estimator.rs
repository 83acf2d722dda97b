//! Conventional and robust bias-corrected estimation of RD effects.
//!
//! Every analysis runs two weighted fits on the same window: the
//! conventional fit with polynomial orders `(p, s)` and the bias-corrected fit
//! with orders `(p + 1, s + 1)`. Estimation and bias-correction bandwidths are
//! always equal, in which case the bias-corrected estimator coincides with
//! the higher-order estimator; its coefficient and sandwich standard error
//! are what the confidence intervals and p-values are built from.
//!
//! Three analyses are supported:
//!
//! * average effect at the cutoff (no heterogeneity covariates),
//! * subgroup effects for binary orthogonal covariates, either estimated
//!   group by group or in one cell-means fit with a joint bandwidth,
//! * functional-coefficient CATEs `κ(w) = θ + ξ'w` for generic covariates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bandwidth::{resolve_policy, BandwidthResult};
use crate::covariates::{classify_heterogeneity, parse_covariate_spec, HeteroMode, HeterogeneityDesign};
use crate::data::{build_treatment, CovariateBlock, Sample};
use crate::design::{
    build_design, drop_collinear, treated_hetero_name, treated_name, DesignMatrix, DroppedColumn, WCoding,
};
use crate::error::{RdError, Result};
use crate::kernel::{localization_weights, KernelKind};
use crate::parallel::par_map;
use crate::wls::{sandwich_vcov, wls_fit, VceKind, Vcov, WlsFit};

/// How bandwidths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPolicy {
    /// One bandwidth for every group. With `joint`, subgroup analyses run as a
    /// single cell-means fit instead of one fit per group.
    Manual { h: f64, joint: bool },
    /// A bandwidth per subgroup label.
    PerGroup(BTreeMap<String, f64>),
    /// Data-driven MSE-optimal bandwidths, per group unless `joint`.
    Auto { joint: bool },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::Auto { joint: false }
    }
}

impl BandwidthPolicy {
    pub fn is_joint(&self) -> bool {
        matches!(
            self,
            BandwidthPolicy::Manual { joint: true, .. } | BandwidthPolicy::Auto { joint: true }
        )
    }

    pub fn describe(&self) -> String {
        match self {
            BandwidthPolicy::Manual { h, joint: false } => format!("manual h={h}"),
            BandwidthPolicy::Manual { h, joint: true } => format!("manual h={h} (joint)"),
            BandwidthPolicy::PerGroup(m) => {
                let parts: Vec<String> = m.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("manual per group ({})", parts.join(", "))
            }
            BandwidthPolicy::Auto { joint: false } => "MSE-optimal (per group)".into(),
            BandwidthPolicy::Auto { joint: true } => "MSE-optimal (joint)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub cutoff: f64,
    pub p: usize,
    /// Polynomial order of the covariate interactions; defaults to `p`.
    pub s: Option<usize>,
    pub kernel: KernelKind,
    pub vce: VceKind,
    pub level: f64,
    pub bandwidth: BandwidthPolicy,
    /// Relative residual-norm threshold for dropping collinear columns.
    pub collinearity_tol: f64,
    /// Add the bias-variance regularization term in bandwidth selection.
    pub regularize: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            cutoff: 0.0,
            p: 1,
            s: None,
            kernel: KernelKind::Triangular,
            vce: VceKind::Hc3,
            level: 0.95,
            bandwidth: BandwidthPolicy::default(),
            collinearity_tol: 1e-10,
            regularize: true,
        }
    }
}

impl EstimationConfig {
    pub fn s(&self) -> usize {
        self.s.unwrap_or(self.p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cutoff.is_finite() {
            return Err(RdError::InvalidConfig("cutoff must be finite".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RdError::InvalidConfig(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        match &self.bandwidth {
            BandwidthPolicy::Manual { h, .. } if !(*h > 0.0 && h.is_finite()) => {
                return Err(RdError::NonpositiveBandwidth(*h))
            }
            BandwidthPolicy::PerGroup(m) => {
                if let Some((_, h)) = m.iter().find(|(_, h)| !(**h > 0.0 && h.is_finite())) {
                    return Err(RdError::NonpositiveBandwidth(*h));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Two-sided normal critical value for `level`.
    pub fn critical_value(&self) -> f64 {
        normal_quantile(1.0 - (1.0 - self.level) / 2.0)
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Two-sided normal p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * std_normal().sf(z.abs())).min(1.0)
}

/// Data for local fits: centred score, outcome and optional covariate blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    /// Score minus cutoff.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Treatment indicator from the raw score.
    pub t: Vec<f64>,
    pub w: Option<CovariateBlock>,
    pub z: Option<CovariateBlock>,
    pub clusters: Option<Vec<usize>>,
    pub coding: WCoding,
}

impl LocalData {
    pub fn from_sample(sample: &Sample, cutoff: f64, w: Option<CovariateBlock>, coding: WCoding) -> Self {
        LocalData {
            x: sample.x.iter().map(|v| v - cutoff).collect(),
            y: sample.y.clone(),
            t: build_treatment(&sample.x, cutoff),
            w,
            z: sample.efficiency_block(),
            clusters: sample.clusters.clone(),
            coding,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn subset(&self, rows: &[usize]) -> LocalData {
        LocalData {
            x: rows.iter().map(|&i| self.x[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            w: self.w.as_ref().map(|b| b.select_rows(rows)),
            z: self.z.as_ref().map(|b| b.select_rows(rows)),
            clusters: self.clusters.as_ref().map(|c| rows.iter().map(|&i| c[i]).collect()),
            coding: self.coding,
        }
    }

    pub fn design(&self, p: usize, s: usize) -> Result<DesignMatrix> {
        build_design(&self.x, &self.t, self.w.as_ref(), self.z.as_ref(), p, s, self.coding)
    }

    /// Rows with positive treatment / control counts.
    pub fn side_counts(&self) -> (usize, usize) {
        let right = self.t.iter().filter(|&&t| t == 1.0).count();
        (self.n() - right, right)
    }
}

/// One weighted fit at a given pair of polynomial orders.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub p: usize,
    pub s: usize,
    pub design: DesignMatrix,
    pub fit: WlsFit,
    pub vcov: Vcov,
}

impl OrderFit {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.design.position(name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.position(name).map(|j| self.fit.beta[j])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.position(name).map(|j| self.vcov.matrix[(j, j)].max(0.0).sqrt())
    }
}

/// Weighted fit of `data` at orders `(p, s)`.
pub fn fit_order(data: &LocalData, weights: &[f64], p: usize, s: usize, vce: &VceKind, tol: f64) -> Result<OrderFit> {
    let raw = data.design(p, s)?;
    let design = drop_collinear(&raw, weights, tol)?;
    let fit = wls_fit(&design, weights, &data.y)?;
    let vcov = sandwich_vcov(&fit, &design, weights, vce, data.clusters.as_deref())?;
    Ok(OrderFit {
        p,
        s,
        design,
        fit,
        vcov,
    })
}

/// Conventional and bias-corrected fits sharing one bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct RbcPair {
    pub h: f64,
    pub conventional: OrderFit,
    pub bias_corrected: OrderFit,
    pub n_left: usize,
    pub n_right: usize,
    /// Local data restricted to the positive-weight window.
    pub window: LocalData,
    pub weights: Vec<f64>,
}

/// Orders used for the bias-corrected fit.
pub fn bias_corrected_orders(p: usize, s: usize) -> (usize, usize) {
    (p + 1, s + 1)
}

/// Fit both orders on the kernel window of bandwidth `h`.
pub fn rbc_pair(data: &LocalData, h: f64, config: &EstimationConfig) -> Result<RbcPair> {
    let all_w = localization_weights(config.kernel, &data.x, 0.0, h)?;
    let support: Vec<usize> = (0..data.n()).filter(|&i| all_w[i] > 0.0).collect();
    let window = data.subset(&support);
    let weights: Vec<f64> = support.iter().map(|&i| all_w[i]).collect();
    let (n_left, n_right) = window.side_counts();
    let (p, s) = (config.p, config.s());
    let (pb, sb) = bias_corrected_orders(p, s);
    if n_left < pb + 1 || n_right < pb + 1 {
        return Err(RdError::InsufficientObservations(format!(
            "need at least {} observations on each side of the cutoff within h={h}, have {n_left} left and {n_right} right",
            pb + 1
        )));
    }
    let conventional = fit_order(&window, &weights, p, s, &config.vce, config.collinearity_tol)?;
    let bias_corrected = fit_order(&window, &weights, pb, sb, &config.vce, config.collinearity_tol)?;
    Ok(RbcPair {
        h,
        conventional,
        bias_corrected,
        n_left,
        n_right,
        window,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultMode {
    Ate,
    Subgroup,
    Generic,
}

impl ResultMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultMode::Ate => "ATE",
            ResultMode::Subgroup => "Subgroup",
            ResultMode::Generic => "Generic",
        }
    }
}

/// Whether reported rows come from independent fits or one joint fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    /// Disjoint subsamples: cross-row covariances are exactly zero.
    IndependentFits,
    JointFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub label: String,
    #[serde(rename = "conventional")]
    pub conventional_estimate: f64,
    pub conventional_se: f64,
    #[serde(rename = "rbc")]
    pub rbc_estimate: f64,
    #[serde(rename = "se")]
    pub rbc_se: f64,
    pub z: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub ci: [f64; 2],
    pub h: f64,
    #[serde(rename = "n_left")]
    pub n_eff_left: usize,
    #[serde(rename = "n_right")]
    pub n_eff_right: usize,
}

/// Echo of the settings a result was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub cutoff: f64,
    pub p: usize,
    pub s: usize,
    pub kernel: KernelKind,
    pub vce: VceKind,
    pub level: f64,
    pub bandwidth: String,
    pub hetero: Option<String>,
    pub efficiency: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdResult {
    pub mode: ResultMode,
    pub config: ConfigEcho,
    pub rows: Vec<EffectRow>,
    /// Bias-corrected estimates of the reported rows.
    pub theta_hat: Vec<f64>,
    /// Covariance of `theta_hat`.
    #[serde(rename = "V_rbc")]
    pub v_rbc: Vec<Vec<f64>>,
    pub group_labels: Vec<String>,
    pub covariance: CovarianceStructure,
    pub n_obs: usize,
    pub rows_dropped: usize,
    pub dropped: Vec<DroppedColumn>,
    pub warnings: Vec<String>,
}

impl RdResult {
    pub fn labels(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.label.clone()).collect()
    }

    pub fn row(&self, label: &str) -> Option<&EffectRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn v_matrix(&self) -> DMatrix<f64> {
        let k = self.rows.len();
        DMatrix::from_fn(k, k, |i, j| self.v_rbc[i][j])
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_hat)
    }
}

struct RowSource<'a> {
    label: String,
    coef: String,
    pair: &'a RbcPair,
    n_left: usize,
    n_right: usize,
}

fn make_row(src: &RowSource<'_>, crit: f64) -> Option<EffectRow> {
    let conv = src.pair.conventional.coef(&src.coef)?;
    let conv_se = src.pair.conventional.se(&src.coef)?;
    let rbc = src.pair.bias_corrected.coef(&src.coef)?;
    let se = src.pair.bias_corrected.se(&src.coef)?;
    let z = rbc / se;
    Some(EffectRow {
        label: src.label.clone(),
        conventional_estimate: conv,
        conventional_se: conv_se,
        rbc_estimate: rbc,
        rbc_se: se,
        z,
        p_value: two_sided_p(z),
        ci: [rbc - crit * se, rbc + crit * se],
        h: src.pair.h,
        n_eff_left: src.n_left,
        n_eff_right: src.n_right,
    })
}

/// `subgroup` marks analyses where bandwidths may differ across rows.
fn echo(config: &EstimationConfig, subgroup: bool, sample: &Sample) -> ConfigEcho {
    let bandwidth = match config.bandwidth {
        BandwidthPolicy::Auto { .. } if !subgroup => "MSE-optimal".to_string(),
        _ => config.bandwidth.describe(),
    };
    ConfigEcho {
        cutoff: config.cutoff,
        p: config.p,
        s: config.s(),
        kernel: config.kernel,
        vce: config.vce.clone(),
        level: config.level,
        bandwidth,
        hetero: None,
        efficiency: sample.efficiency.iter().map(|c| c.name.clone()).collect(),
    }
}

fn vcov_warnings(pair: &RbcPair) -> Vec<String> {
    pair.conventional
        .vcov
        .warnings
        .iter()
        .chain(pair.bias_corrected.vcov.warnings.iter())
        .cloned()
        .collect()
}

fn check_clusters(sample: &Sample, config: &EstimationConfig) -> Result<()> {
    if config.vce.is_cluster() && sample.clusters.is_none() {
        return Err(RdError::MissingClusters);
    }
    Ok(())
}

/// Estimate with an optional heterogeneity expression.
pub fn estimate(sample: &Sample, hetero: Option<&str>, config: &EstimationConfig) -> Result<RdResult> {
    if sample.x.iter().all(|&x| x == sample.x[0]) {
        return Err(RdError::DegenerateScore);
    }
    match hetero.map(str::trim).filter(|e| !e.is_empty()) {
        None => estimate_ate(sample, config),
        Some(expr) => {
            let spec = parse_covariate_spec(expr, sample)?;
            let design = classify_heterogeneity(&spec, sample)?;
            let mut res = match design.mode {
                HeteroMode::Subgroup => estimate_subgroup(sample, &design, config)?,
                HeteroMode::Generic => estimate_generic(sample, &design, config)?,
            };
            res.config.hetero = Some(expr.to_string());
            Ok(res)
        }
    }
}

fn single_bandwidth(bw: &BandwidthResult) -> Result<f64> {
    bw.entries
        .first()
        .map(|e| e.h)
        .ok_or_else(|| match bw.failures.first() {
            Some((_, reason)) => RdError::InsufficientObservations(reason.clone()),
            None => RdError::InsufficientObservations("no bandwidth available".into()),
        })
}

/// Average effect at the cutoff, optionally adjusted for efficiency covariates.
pub fn estimate_ate(sample: &Sample, config: &EstimationConfig) -> Result<RdResult> {
    config.validate()?;
    check_clusters(sample, config)?;
    let data = LocalData::from_sample(sample, config.cutoff, None, WCoding::Standard);
    let bw = resolve_policy(sample, None, config)?;
    let h = single_bandwidth(&bw)?;
    let pair = rbc_pair(&data, h, config)?;
    let row = make_row(
        &RowSource {
            label: "T".into(),
            coef: treated_name(0),
            pair: &pair,
            n_left: pair.n_left,
            n_right: pair.n_right,
        },
        config.critical_value(),
    )
    .ok_or_else(|| RdError::InsufficientObservations("treatment coefficient was dropped".into()))?;
    let mut dropped = pair.bias_corrected.design.dropped.clone();
    for d in &pair.conventional.design.dropped {
        if !dropped.contains(d) {
            dropped.push(d.clone());
        }
    }
    Ok(RdResult {
        mode: ResultMode::Ate,
        config: echo(config, false, sample),
        theta_hat: vec![row.rbc_estimate],
        v_rbc: vec![vec![row.rbc_se * row.rbc_se]],
        rows: vec![row],
        group_labels: Vec::new(),
        covariance: CovarianceStructure::IndependentFits,
        n_obs: sample.n(),
        rows_dropped: sample.rows_dropped,
        dropped,
        warnings: vcov_warnings(&pair),
    })
}

/// Subgroup effects for a binary orthogonal design.
pub fn estimate_subgroup(sample: &Sample, design: &HeterogeneityDesign, config: &EstimationConfig) -> Result<RdResult> {
    config.validate()?;
    check_clusters(sample, config)?;
    if design.mode != HeteroMode::Subgroup {
        return Err(RdError::ModeMismatch {
            expected: "subgroup",
            found: "generic",
        });
    }
    if config.bandwidth.is_joint() {
        return estimate_subgroup_joint(sample, design, config);
    }

    let bw = resolve_policy(sample, Some(design), config)?;
    let crit = config.critical_value();
    let group_rows = design.group_rows();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for (label, reason) in &bw.failures {
        dropped.push(DroppedColumn {
            name: label.clone(),
            reason: format!("group too small: {reason}"),
        });
        warnings.push(RdError::GroupTooSmall(label.clone()).to_string());
    }

    let jobs: Vec<(usize, f64)> = design
        .group_labels
        .iter()
        .enumerate()
        .filter_map(|(g, label)| bw.get(label).map(|h| (g, h)))
        .collect();
    let outcomes = par_map(&jobs, |&(g, h)| {
        let sub = sample.subset(&group_rows[g]);
        let data = LocalData::from_sample(&sub, config.cutoff, None, WCoding::Standard);
        rbc_pair(&data, h, config)
    });

    let mut rows = Vec::new();
    for (&(g, _), outcome) in jobs.iter().zip(outcomes) {
        let label = &design.group_labels[g];
        let pair = match outcome {
            Ok(pair) => pair,
            Err(RdError::InsufficientObservations(reason)) => {
                dropped.push(DroppedColumn {
                    name: label.clone(),
                    reason: format!("group too small: {reason}"),
                });
                warnings.push(RdError::GroupTooSmall(label.clone()).to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        warnings.extend(vcov_warnings(&pair));
        let src = RowSource {
            label: label.clone(),
            coef: treated_name(0),
            pair: &pair,
            n_left: pair.n_left,
            n_right: pair.n_right,
        };
        match make_row(&src, crit) {
            Some(r) => rows.push(r),
            None => dropped.push(DroppedColumn {
                name: label.clone(),
                reason: "treatment coefficient dropped as collinear".into(),
            }),
        }
    }
    if rows.is_empty() {
        return Err(RdError::InsufficientObservations(
            "no subgroup could be estimated".into(),
        ));
    }

    let k = rows.len();
    let theta_hat = rows.iter().map(|r| r.rbc_estimate).collect();
    let v_rbc = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { rows[i].rbc_se * rows[i].rbc_se } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(RdResult {
        mode: ResultMode::Subgroup,
        config: echo(config, true, sample),
        group_labels: rows.iter().map(|r| r.label.clone()).collect(),
        rows,
        theta_hat,
        v_rbc,
        covariance: CovarianceStructure::IndependentFits,
        n_obs: sample.n(),
        rows_dropped: sample.rows_dropped,
        dropped,
        warnings,
    })
}

fn estimate_subgroup_joint(
    sample: &Sample,
    design: &HeterogeneityDesign,
    config: &EstimationConfig,
) -> Result<RdResult> {
    let bw = resolve_policy(sample, Some(design), config)?;
    let h = single_bandwidth(&bw)?;
    let full = LocalData::from_sample(sample, config.cutoff, Some(design.w.clone()), WCoding::CellMeans);
    let weights = localization_weights(config.kernel, &full.x, 0.0, h)?;
    let need = bias_corrected_orders(config.p, config.s()).0 + 1;

    // per-group side counts inside the window
    let g_count = design.n_groups();
    let mut counts = vec![(0usize, 0usize); g_count];
    for i in 0..full.n() {
        if weights[i] > 0.0 {
            let c = &mut counts[design.group_index[i]];
            if full.t[i] == 1.0 {
                c.1 += 1;
            } else {
                c.0 += 1;
            }
        }
    }
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    let kept_groups: Vec<usize> = (0..g_count)
        .filter(|&g| {
            let (l, r) = counts[g];
            let ok = l >= need && r >= need;
            if !ok {
                let label = &design.group_labels[g];
                dropped.push(DroppedColumn {
                    name: label.clone(),
                    reason: format!("group too small: {l} left and {r} right within h={h}"),
                });
                warnings.push(RdError::GroupTooSmall(label.clone()).to_string());
            }
            ok
        })
        .collect();
    if kept_groups.is_empty() {
        return Err(RdError::InsufficientObservations(
            "no subgroup has enough observations on both sides".into(),
        ));
    }
    let rows_kept: Vec<usize> = (0..full.n())
        .filter(|&i| kept_groups.contains(&design.group_index[i]))
        .collect();
    let mut data = full.subset(&rows_kept);
    if let Some(w) = data.w.as_mut() {
        *w = CovariateBlock {
            names: kept_groups.iter().map(|&g| w.names[g].clone()).collect(),
            values: w.values.select_columns(&kept_groups),
        };
    }
    let pair = rbc_pair(&data, h, config)?;
    warnings.extend(vcov_warnings(&pair));

    let crit = config.critical_value();
    let mut rows = Vec::new();
    let mut coefs = Vec::new();
    for &g in &kept_groups {
        let label = &design.group_labels[g];
        let coef = treated_hetero_name(0, label);
        let src = RowSource {
            label: label.clone(),
            coef: coef.clone(),
            pair: &pair,
            n_left: counts[g].0,
            n_right: counts[g].1,
        };
        match make_row(&src, crit) {
            Some(r) => {
                rows.push(r);
                coefs.push(coef);
            }
            None => dropped.push(DroppedColumn {
                name: label.clone(),
                reason: "group effect dropped as collinear".into(),
            }),
        }
    }
    let (theta_hat, v_rbc) = sub_covariance(&pair.bias_corrected, &coefs);
    Ok(RdResult {
        mode: ResultMode::Subgroup,
        config: echo(config, true, sample),
        group_labels: rows.iter().map(|r| r.label.clone()).collect(),
        rows,
        theta_hat,
        v_rbc,
        covariance: CovarianceStructure::JointFit,
        n_obs: sample.n(),
        rows_dropped: sample.rows_dropped,
        dropped,
        warnings,
    })
}

fn sub_covariance(fit: &OrderFit, coefs: &[String]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let idx: Vec<usize> = coefs.iter().filter_map(|c| fit.position(c)).collect();
    let theta = idx.iter().map(|&j| fit.fit.beta[j]).collect();
    let v = idx
        .iter()
        .map(|&a| idx.iter().map(|&b| fit.vcov.matrix[(a, b)]).collect())
        .collect();
    (theta, v)
}

/// Functional-coefficient CATE `κ(w) = θ + ξ'w` for generic covariates. The
/// first row is the treatment intercept `θ`, followed by one slope row per
/// covariate column.
pub fn estimate_generic(sample: &Sample, design: &HeterogeneityDesign, config: &EstimationConfig) -> Result<RdResult> {
    config.validate()?;
    check_clusters(sample, config)?;
    if design.mode != HeteroMode::Generic {
        return Err(RdError::ModeMismatch {
            expected: "generic",
            found: "subgroup",
        });
    }
    let bw = resolve_policy(sample, Some(design), config)?;
    let h = single_bandwidth(&bw)?;
    let data = LocalData::from_sample(sample, config.cutoff, Some(design.w.clone()), WCoding::Standard);
    let pair = rbc_pair(&data, h, config)?;
    let crit = config.critical_value();

    let mut targets = vec![("T".to_string(), treated_name(0))];
    for wn in &design.w.names {
        let c = treated_hetero_name(0, wn);
        targets.push((c.clone(), c));
    }
    let mut rows = Vec::new();
    let mut coefs = Vec::new();
    let mut dropped = Vec::new();
    for (label, coef) in targets {
        let src = RowSource {
            label: label.clone(),
            coef: coef.clone(),
            pair: &pair,
            n_left: pair.n_left,
            n_right: pair.n_right,
        };
        match make_row(&src, crit) {
            Some(r) => {
                rows.push(r);
                coefs.push(coef);
            }
            None if label == "T" => {
                return Err(RdError::InsufficientObservations(
                    "treatment intercept dropped as collinear".into(),
                ))
            }
            None => dropped.push(DroppedColumn {
                name: label,
                reason: "collinear or constant on the window".into(),
            }),
        }
    }
    for d in pair
        .bias_corrected
        .design
        .dropped
        .iter()
        .chain(pair.conventional.design.dropped.iter())
    {
        if !dropped.iter().any(|x| x.name == d.name) && !rows.iter().any(|r| r.label == d.name) {
            dropped.push(d.clone());
        }
    }
    let (theta_hat, v_rbc) = sub_covariance(&pair.bias_corrected, &coefs);
    Ok(RdResult {
        mode: ResultMode::Generic,
        config: echo(config, false, sample),
        rows,
        theta_hat,
        v_rbc,
        group_labels: Vec::new(),
        covariance: CovarianceStructure::JointFit,
        n_obs: sample.n(),
        rows_dropped: sample.rows_dropped,
        dropped,
        warnings: vcov_warnings(&pair),
    })
}

/// Point estimate and inference for one linear functional of the rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci: [f64; 2],
}

impl Inference {
    pub fn from_contrast(theta: &DVector<f64>, v: &DMatrix<f64>, c: &DVector<f64>, level: f64) -> Self {
        let estimate = c.dot(theta);
        let se = (c.transpose() * v * c)[(0, 0)].max(0.0).sqrt();
        let z = estimate / se;
        let crit = normal_quantile(1.0 - (1.0 - level) / 2.0);
        Inference {
            estimate,
            se,
            z,
            p: two_sided_p(z),
            ci: [estimate - crit * se, estimate + crit * se],
        }
    }
}

/// `κ̂(w)` with bias-corrected inference from a generic result.
pub fn cate_at(result: &RdResult, w: &[f64]) -> Result<Inference> {
    if result.mode != ResultMode::Generic {
        return Err(RdError::ModeMismatch {
            expected: "generic",
            found: match result.mode {
                ResultMode::Ate => "ATE",
                _ => "subgroup",
            },
        });
    }
    let d = result.rows.len() - 1;
    if w.len() != d {
        return Err(RdError::DimensionMismatch {
            what: "covariate vector",
            expected: d,
            found: w.len(),
        });
    }
    let c = DVector::from_iterator(d + 1, std::iter::once(1.0).chain(w.iter().copied()));
    Ok(Inference::from_contrast(
        &result.theta(),
        &result.v_matrix(),
        &c,
        result.config.level,
    ))
}
