//! MSE-optimal plug-in bandwidths.
//!
//! The selector is a direct plug-in of the first-order MSE expansion of the
//! local polynomial RD estimator,
//!
//! ```text
//! h = [ V / (2(p+1) (B² + R)) ]^(1/(2p+3)) · n^(-1/(2p+3))
//! ```
//!
//! summed over all reported coefficients:
//!
//! * a pilot window `|x - c| ≤ h₀` with `h₀ = 2.58 · min(sd, IQR/1.349) · n^(-1/5)`,
//! * `B` is the boundary equivalent-kernel bias constant times the jump in the
//!   `(p+1)`-th derivative, read off an order `(p+2, s+2)` fit on the pilot
//!   window,
//! * `R` is three times the estimated variance of `B`; it keeps `h` finite when
//!   the curvature estimate is close to zero and can be switched off,
//! * `V` combines side-specific residual variances (leverage-corrected) from
//!   an order `(p, s)` pilot fit, the equivalent-kernel variance constant,
//!   the density estimate `#{|x - c| ≤ h₀} / (2 n h₀)` and, with covariate
//!   interactions, the diagonal of the inverse second-moment matrix of the
//!   interacted regressors.
//!
//! The result is capped at the largest `|x - c|` of the (sub)sample.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{HeteroMode, HeterogeneityDesign};
use crate::data::Sample;
use crate::design::{control_name, hetero_name, treated_hetero_name, treated_name, WCoding};
use crate::error::{RdError, Result};
use crate::estimator::{fit_order, BandwidthPolicy, EstimationConfig, LocalData, OrderFit};
use crate::kernel::KernelKind;
use crate::parallel::par_map;
use crate::wls::VceKind;

/// Equivalent-kernel constants of the boundary local polynomial estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    /// `e₀'Γ⁻¹ϑ`, multiplies `h^(p+1) m^(p+1)/(p+1)!` in the bias.
    pub bias: f64,
    /// `e₀'Γ⁻¹ΨΓ⁻¹e₀`, multiplies `σ² / (n h f)` in the variance.
    pub variance: f64,
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 1..=m {
        let mut z = (std::f64::consts::PI * (i as f64 - 0.25) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes.push((z + 1.0) / 2.0);
        weights.push(1.0 / ((1.0 - z * z) * dp * dp));
    }
    (nodes, weights)
}

/// Constants for a one-sided fit of order `p` on `[0, 1]`, by quadrature.
/// The kernels are polynomial on `[0, 1]`, so 32 nodes integrate exactly.
pub fn kernel_constants(kind: KernelKind, p: usize) -> KernelConstants {
    let (u, wq) = gauss_legendre(32);
    let moment = |power: usize, squared: bool| -> f64 {
        u.iter()
            .zip(&wq)
            .map(|(&ui, &wi)| {
                let k = kind.value(ui);
                wi * if squared { k * k } else { k } * ui.powi(power as i32)
            })
            .sum()
    };
    let m = p + 1;
    let gamma = DMatrix::from_fn(m, m, |i, j| moment(i + j, false));
    let psi = DMatrix::from_fn(m, m, |i, j| moment(i + j, true));
    let theta = DVector::from_fn(m, |i, _| moment(p + 1 + i, false));
    let ginv = gamma.try_inverse().expect("kernel moment matrix is positive definite");
    let e0 = ginv.row(0).transpose();
    KernelConstants {
        bias: e0.dot(&theta),
        variance: (e0.transpose() * &psi * &e0)[(0, 0)],
    }
}

/// `[V / (2(p+1)(B² + R))]^(1/(2p+3)) · n^(-1/(2p+3))`; infinite when the
/// denominator vanishes.
pub fn plug_in(variance: f64, bias_sq: f64, regularization: f64, n: usize, p: usize) -> f64 {
    let denom = 2.0 * (p + 1) as f64 * (bias_sq + regularization);
    if !(denom > 0.0) {
        return f64::INFINITY;
    }
    let e = 1.0 / (2 * p + 3) as f64;
    (variance / denom).powf(e) * (n as f64).powf(-e)
}

/// Settings of one selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthOptions {
    pub p: usize,
    pub s: usize,
    pub kernel: KernelKind,
    pub vce: VceKind,
    pub regularize: bool,
    pub collinearity_tol: f64,
}

impl BandwidthOptions {
    pub fn from_config(config: &EstimationConfig) -> Self {
        BandwidthOptions {
            p: config.p,
            s: config.s(),
            kernel: config.kernel,
            vce: config.vce.clone(),
            regularize: config.regularize,
            collinearity_tol: config.collinearity_tol,
        }
    }
}

/// One selected bandwidth with the pieces of the plug-in formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub h: f64,
    pub h_pilot: f64,
    /// Sum of squared bias constants `B̂²`.
    pub bias_sq: f64,
    /// Sum of variance constants `V̂`.
    pub variance: f64,
    /// Regularization term added to `B̂²`.
    pub regularization: f64,
    pub density: f64,
    pub n: usize,
    pub n_pilot: usize,
    /// True when `h` was capped at the largest distance to the cutoff.
    pub capped: bool,
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Pilot bandwidth `2.58 · min(sd, IQR/1.349) · n^(-1/5)` of centred scores.
pub fn pilot_bandwidth(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(RdError::InsufficientObservations(format!(
            "bandwidth selection needs at least 2 observations, have {n}"
        )));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(RdError::DegenerateScore);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
    Ok(2.58 * spread * (n as f64).powf(-0.2))
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v.len()
}

/// `(treated, control)` coefficient names whose combination gives the jump in
/// the `j`-th derivative coefficient for every reported effect.
fn jump_targets(data: &LocalData, j: usize) -> Vec<(String, String)> {
    match (&data.w, data.coding) {
        (Some(w), WCoding::CellMeans) => w
            .names
            .iter()
            .map(|g| (treated_hetero_name(j, g), hetero_name(j, g)))
            .collect(),
        (Some(w), WCoding::Standard) => std::iter::once((treated_name(j), control_name(j)))
            .chain(w.names.iter().map(|g| (treated_hetero_name(j, g), hetero_name(j, g))))
            .collect(),
        (None, _) => vec![(treated_name(j), control_name(j))],
    }
}

/// Second-moment matrix of the regressors multiplying the reported effects.
fn moment_matrix(data: &LocalData) -> DMatrix<f64> {
    let n = data.n() as f64;
    match (&data.w, data.coding) {
        (Some(w), WCoding::CellMeans) => w.values.tr_mul(&w.values) / n,
        (Some(w), WCoding::Standard) => {
            let v = w.values.clone().insert_column(0, 1.0);
            v.tr_mul(&v) / n
        }
        (None, _) => DMatrix::from_element(1, 1, 1.0),
    }
}

fn contrast_value(fit: &OrderFit, t: &str, c: &str, factor: f64) -> (f64, f64) {
    let it = fit.position(t);
    let ic = fit.position(c);
    let coef = |i: Option<usize>| i.map_or(0.0, |i| fit.fit.beta[i]);
    let est = coef(it) + factor * coef(ic);
    let v = &fit.vcov.matrix;
    let mut var = 0.0;
    if let Some(a) = it {
        var += v[(a, a)];
    }
    if let Some(b) = ic {
        var += factor * factor * v[(b, b)];
        if let Some(a) = it {
            var += 2.0 * factor * v[(a, b)];
        }
    }
    (est, var.max(0.0))
}

/// Plug-in bandwidth for the analysis described by `data` (centred scores,
/// covariate block and coding).
pub fn select_bandwidth(data: &LocalData, opts: &BandwidthOptions) -> Result<BandwidthSelection> {
    let n = data.n();
    let (p, s) = (opts.p, opts.s);
    let h_pilot = pilot_bandwidth(&data.x)?;
    let window: Vec<usize> = (0..n).filter(|&i| data.x[i].abs() <= h_pilot).collect();
    let need = p + 3;
    let left = distinct(window.iter().filter(|&&i| data.t[i] == 0.0).map(|&i| data.x[i]));
    let right = distinct(window.iter().filter(|&&i| data.t[i] == 1.0).map(|&i| data.x[i]));
    if left < need || right < need {
        return Err(RdError::InsufficientObservations(format!(
            "bandwidth selection needs {need} distinct score values on each side within the pilot window, have {left} left and {right} right"
        )));
    }
    let mut pilot = data.subset(&window);
    pilot.z = None;
    let ones = vec![1.0; pilot.n()];
    let constants = kernel_constants(opts.kernel, p);

    // curvature jumps
    let high = fit_order(&pilot, &ones, p + 2, s + 2, &opts.vce, opts.collinearity_tol)?;
    let sign = if (p + 1) % 2 == 0 { 0.0 } else { 2.0 };
    let mut bias_sq = 0.0;
    let mut reg = 0.0;
    for (t, c) in jump_targets(&pilot, p + 1) {
        let (jump, var) = contrast_value(&high, &t, &c, sign);
        bias_sq += (constants.bias * jump).powi(2);
        reg += constants.bias * constants.bias * var;
    }
    if !opts.regularize {
        reg = 0.0;
    }

    // residual variances by side
    let low = fit_order(&pilot, &ones, p, s, &opts.vce, opts.collinearity_tol)?;
    let mut ss = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    for (r, &i) in low.fit.support.iter().enumerate() {
        let side = pilot.t[i] as usize;
        let e = low.fit.residuals[r];
        ss[side] += e * low.fit.adjusted_residual(r, 1.0);
        cnt[side] += 1;
    }
    let sigma2: f64 = (0..2).map(|k| ss[k] / cnt[k].max(1) as f64).sum();
    let density = window.len() as f64 / (2.0 * n as f64 * h_pilot);
    let q = moment_matrix(&pilot);
    let qinv = q
        .clone()
        .try_inverse()
        .or_else(|| q.pseudo_inverse(1e-12).ok())
        .ok_or(RdError::SingularDesign)?;
    let variance = sigma2 * constants.variance * qinv.diagonal().sum() / density;

    let raw = plug_in(variance, bias_sq, reg, n, p);
    let max_dist = data.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let capped = !(raw <= max_dist);
    Ok(BandwidthSelection {
        h: if capped { max_dist } else { raw },
        h_pilot,
        bias_sq,
        variance,
        regularization: reg,
        density,
        n,
        n_pilot: window.len(),
        capped,
    })
}

/// Bandwidth for one label. `diagnostics` is absent for manual choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEntry {
    pub label: String,
    pub h: f64,
    pub diagnostics: Option<BandwidthSelection>,
}

/// Label used for a single bandwidth shared by every reported effect.
pub const JOINT_LABEL: &str = "(joint)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthResult {
    pub joint: bool,
    pub entries: Vec<BandwidthEntry>,
    /// Groups for which no bandwidth could be selected, with the reason.
    pub failures: Vec<(String, String)>,
}

impl BandwidthResult {
    /// Bandwidth for `label`; a joint bandwidth applies to every label.
    pub fn get(&self, label: &str) -> Option<f64> {
        if self.joint {
            return self.entries.first().map(|e| e.h);
        }
        self.entries.iter().find(|e| e.label == label).map(|e| e.h)
    }

    pub fn per_group(&self) -> BTreeMap<String, f64> {
        self.entries.iter().map(|e| (e.label.clone(), e.h)).collect()
    }
}

fn single(label: &str, h: f64, diagnostics: Option<BandwidthSelection>) -> BandwidthResult {
    BandwidthResult {
        joint: true,
        entries: vec![BandwidthEntry {
            label: label.to_string(),
            h,
            diagnostics,
        }],
        failures: Vec::new(),
    }
}

fn auto_single(data: &LocalData, label: &str, config: &EstimationConfig) -> Result<BandwidthResult> {
    let sel = select_bandwidth(data, &BandwidthOptions::from_config(config))?;
    Ok(single(label, sel.h, Some(sel)))
}

/// Turn a bandwidth policy into concrete bandwidths for the analysis.
pub fn resolve_policy(
    sample: &Sample,
    design: Option<&HeterogeneityDesign>,
    config: &EstimationConfig,
) -> Result<BandwidthResult> {
    config.validate()?;
    let per_group_misuse =
        || RdError::InvalidConfig("per-group bandwidths need a subgroup heterogeneity design".into());
    let design = match design {
        None => {
            return match &config.bandwidth {
                BandwidthPolicy::Manual { h, .. } => Ok(single("T", *h, None)),
                BandwidthPolicy::PerGroup(_) => Err(per_group_misuse()),
                BandwidthPolicy::Auto { .. } => {
                    let data = LocalData::from_sample(sample, config.cutoff, None, WCoding::Standard);
                    auto_single(&data, "T", config)
                }
            }
        }
        Some(d) => d,
    };

    match design.mode {
        HeteroMode::Generic => match &config.bandwidth {
            BandwidthPolicy::Manual { h, .. } => Ok(single(JOINT_LABEL, *h, None)),
            BandwidthPolicy::PerGroup(_) => Err(per_group_misuse()),
            BandwidthPolicy::Auto { .. } => {
                let data = LocalData::from_sample(sample, config.cutoff, Some(design.w.clone()), WCoding::Standard);
                auto_single(&data, JOINT_LABEL, config)
            }
        },
        HeteroMode::Subgroup => match &config.bandwidth {
            BandwidthPolicy::Manual { h, joint: true } => Ok(single(JOINT_LABEL, *h, None)),
            BandwidthPolicy::Auto { joint: true } => {
                let data = LocalData::from_sample(sample, config.cutoff, Some(design.w.clone()), WCoding::CellMeans);
                auto_single(&data, JOINT_LABEL, config)
            }
            BandwidthPolicy::Manual { h, joint: false } => Ok(BandwidthResult {
                joint: false,
                entries: design
                    .group_labels
                    .iter()
                    .map(|g| BandwidthEntry {
                        label: g.clone(),
                        h: *h,
                        diagnostics: None,
                    })
                    .collect(),
                failures: Vec::new(),
            }),
            BandwidthPolicy::PerGroup(map) => {
                if let Some(unknown) = map.keys().find(|k| !design.group_labels.contains(k)) {
                    return Err(RdError::UnknownLabel {
                        label: unknown.clone(),
                        available: design.group_labels.clone(),
                    });
                }
                let entries = design
                    .group_labels
                    .iter()
                    .map(|g| {
                        map.get(g)
                            .map(|&h| BandwidthEntry {
                                label: g.clone(),
                                h,
                                diagnostics: None,
                            })
                            .ok_or_else(|| RdError::InvalidConfig(format!("no bandwidth given for group `{g}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(BandwidthResult {
                    joint: false,
                    entries,
                    failures: Vec::new(),
                })
            }
            BandwidthPolicy::Auto { joint: false } => {
                let rows = design.group_rows();
                let opts = BandwidthOptions::from_config(config);
                let idx: Vec<usize> = (0..design.n_groups()).collect();
                let outcomes = par_map(&idx, |&g| {
                    let sub = sample.subset(&rows[g]);
                    let data = LocalData::from_sample(&sub, config.cutoff, None, WCoding::Standard);
                    select_bandwidth(&data, &opts)
                });
                let mut entries = Vec::new();
                let mut failures = Vec::new();
                for (g, out) in outcomes.into_iter().enumerate() {
                    let label = design.group_labels[g].clone();
                    match out {
                        Ok(sel) => entries.push(BandwidthEntry {
                            label,
                            h: sel.h,
                            diagnostics: Some(sel),
                        }),
                        Err(e @ (RdError::InsufficientObservations(_) | RdError::DegenerateScore)) => {
                            failures.push((label, e.to_string()))
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ok(BandwidthResult {
                    joint: false,
                    entries,
                    failures,
                })
            }
        },
    }
}
