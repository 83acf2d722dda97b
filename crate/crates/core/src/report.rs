//! Plain-text tables: fixed four decimals, right-aligned columns.

use std::fmt::Write;

use crate::bandwidth::BandwidthResult;
use crate::estimator::{EstimationConfig, Inference, RdResult};
use crate::montecarlo::CoverageReport;
use crate::posthoc::WaldTest;

/// Right-aligned table with a header row and a rule under it.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let ncol = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (j, c) in r.iter().enumerate().take(ncol) {
                width[j] = width[j].max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(j, c)| format!("{c:>w$}", w = width[j]))
                .collect();
            parts.join("  ")
        };
        let mut out = line(&self.header);
        let total = out.chars().count();
        out.push('\n');
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NaN".into()
    }
}

/// Four decimals, switching to scientific notation for very small or large
/// magnitudes.
pub fn num_sci(v: f64) -> String {
    let a = v.abs();
    if v.is_finite() && a != 0.0 && !(1e-3..1e6).contains(&a) {
        format!("{v:.3e}")
    } else {
        num(v)
    }
}

fn level_pct(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round())
    } else {
        format!("{pct}%")
    }
}

fn trailer(out: &mut String, dropped: &[crate::design::DroppedColumn], warnings: &[String]) {
    for d in dropped {
        let _ = writeln!(out, "note: dropped {} ({})", d.name, d.reason);
    }
    for w in warnings {
        let _ = writeln!(out, "warning: {w}");
    }
}

pub fn result_table(result: &RdResult) -> String {
    let c = &result.config;
    let mut out = String::new();
    let title = match result.mode {
        crate::estimator::ResultMode::Ate => "average effect at the cutoff",
        crate::estimator::ResultMode::Subgroup => "subgroup effects",
        crate::estimator::ResultMode::Generic => "conditional effects kappa(w) = T + T#w'w",
    };
    let _ = writeln!(out, "Sharp RD estimates, {title}");
    let _ = writeln!(
        out,
        "Cutoff: {}   Kernel: {}   VCE: {}   p = {}   s = {}",
        c.cutoff, c.kernel, c.vce, c.p, c.s
    );
    let _ = writeln!(out, "Bandwidth: {}", c.bandwidth);
    if let Some(h) = &c.hetero {
        let _ = writeln!(out, "Heterogeneity: {h}");
    }
    if !c.efficiency.is_empty() {
        let _ = writeln!(out, "Efficiency covariates: {}", c.efficiency.join(" "));
    }
    let _ = writeln!(
        out,
        "Observations: {} ({} dropped as missing)",
        result.n_obs, result.rows_dropped
    );
    out.push('\n');
    let ci = format!("{} CI", level_pct(c.level));
    let mut t = Table::new(&[
        "Effect",
        "Conv.",
        "RBC",
        "Std. err.",
        "z",
        "P>|z|",
        &format!("{ci} lo"),
        &format!("{ci} hi"),
        "h",
        "N left",
        "N right",
    ]);
    for r in &result.rows {
        t.push(vec![
            r.label.clone(),
            num(r.conventional_estimate),
            num(r.rbc_estimate),
            num(r.rbc_se),
            num(r.z),
            num(r.p_value),
            num(r.ci[0]),
            num(r.ci[1]),
            num(r.h),
            r.n_eff_left.to_string(),
            r.n_eff_right.to_string(),
        ]);
    }
    out.push_str(&t.render());
    trailer(&mut out, &result.dropped, &result.warnings);
    out
}

pub fn bandwidth_table(bw: &BandwidthResult, config: &EstimationConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "MSE-optimal bandwidths   Kernel: {}   p = {}   s = {}   regularization: {}",
        config.kernel,
        config.p,
        config.s(),
        if config.regularize { "on" } else { "off" }
    );
    out.push('\n');
    let mut t = Table::new(&["Group", "h", "Pilot h", "B^2", "R", "V", "Density", "N", "N pilot"]);
    for e in &bw.entries {
        let mut row = vec![e.label.clone(), num(e.h)];
        match &e.diagnostics {
            Some(d) => row.extend([
                num(d.h_pilot),
                num_sci(d.bias_sq),
                num_sci(d.regularization),
                num_sci(d.variance),
                num_sci(d.density),
                d.n.to_string(),
                d.n_pilot.to_string(),
            ]),
            None => row.extend((0..7).map(|_| "-".to_string())),
        }
        t.push(row);
    }
    out.push_str(&t.render());
    for e in &bw.entries {
        if e.diagnostics.is_some_and(|d| d.capped) {
            let _ = writeln!(out, "note: {} capped at the largest distance to the cutoff", e.label);
        }
    }
    for (label, reason) in &bw.failures {
        let _ = writeln!(out, "warning: no bandwidth for {label}: {reason}");
    }
    out
}

pub fn lincom_table(rows: &[(String, Inference)], level: f64, wald: Option<&WaldTest>) -> String {
    let ci = format!("{} CI", level_pct(level));
    let mut t = Table::new(&[
        "Combination",
        "Estimate",
        "Std. err.",
        "z",
        "P>|z|",
        &format!("{ci} lo"),
        &format!("{ci} hi"),
    ]);
    for (label, inf) in rows {
        t.push(vec![
            label.clone(),
            num(inf.estimate),
            num(inf.se),
            num(inf.z),
            num(inf.p),
            num(inf.ci[0]),
            num(inf.ci[1]),
        ]);
    }
    let mut out = t.render();
    if let Some(w) = wald {
        out.push('\n');
        let mut t = Table::new(&["Joint test", "chi2", "df", "P>chi2"]);
        t.push(vec!["Wald".into(), num(w.chi2), w.df.to_string(), num(w.p)]);
        out.push_str(&t.render());
        for msg in &w.warnings {
            let _ = writeln!(out, "warning: {msg}");
        }
    }
    out
}

pub fn coverage_table(report: &CoverageReport) -> String {
    let mut out = String::new();
    let analysis = match &report.hetero {
        Some(h) => format!("heterogeneity {h}"),
        None => "average effect".to_string(),
    };
    let _ = writeln!(
        out,
        "Simulation: {} DGP, n = {}, {} replications, seed {}, {}",
        report.preset, report.n, report.replications, report.seed, analysis
    );
    let ci = level_pct(report.level);
    let mut t = Table::new(&[
        "Effect",
        "Truth",
        &format!("RBC {ci} cov."),
        &format!("Conv. {ci} cov."),
        "RBC bias",
        "Conv. bias",
        "Mean se",
        "Mean h",
        "Reps",
    ]);
    for r in &report.rows {
        t.push(vec![
            r.label.clone(),
            num(r.truth),
            num(r.coverage_rbc),
            num(r.coverage_conventional),
            num(r.mean_bias_rbc),
            num(r.mean_bias_conventional),
            num(r.mean_se),
            num(r.mean_h),
            r.replications.to_string(),
        ]);
    }
    out.push_str(&t.render());
    if report.failures > 0 {
        let _ = writeln!(out, "warning: {} replications failed to estimate", report.failures);
    }
    out
}
