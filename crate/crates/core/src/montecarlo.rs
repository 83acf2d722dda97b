//! Simulated RD designs with known conditional effects, and coverage
//! experiments built on them.
//!
//! Every preset draws `x ~ U[-1, 1]`, a covariate and Gaussian noise, and
//! writes the outcome as `m_T(x) + b_T(x)·w` so that the CATE at the cutoff
//! is linear in `w` and known exactly. Replication `r` of seed `s` uses the
//! ChaCha stream `r` of key `s`, so replications can run in any order.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, Sample};
use crate::error::{RdError, Result};
use crate::estimator::{estimate, EstimationConfig, ResultMode};
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpPreset {
    /// Linear in `x` on both sides.
    Linear,
    /// Smooth quadratic conditional means with heterogeneity in `w ~ U(0, 1)`.
    Quadratic,
    /// Strong curvature jump plus a cubic term; punishes oversized bandwidths.
    Cubic,
    /// Binary covariate `g` with effects 0.021 (g = 0) and 0.089 (g = 1).
    Subgroup,
}

impl DgpPreset {
    pub const ALL: [DgpPreset; 4] = [
        DgpPreset::Linear,
        DgpPreset::Quadratic,
        DgpPreset::Cubic,
        DgpPreset::Subgroup,
    ];

    /// Heterogeneity expression that matches how the covariate was generated.
    pub fn hetero_expr(self) -> &'static str {
        match self {
            DgpPreset::Subgroup => "i.g",
            _ => "c.w",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            DgpPreset::Linear => 0.2,
            DgpPreset::Quadratic | DgpPreset::Cubic => 0.3,
            DgpPreset::Subgroup => 0.1,
        }
    }

    fn covariate_name(self) -> &'static str {
        match self {
            DgpPreset::Subgroup => "g",
            _ => "w",
        }
    }

    /// `(m₀(x) + b₀(x) w, m₁(x) + b₁(x) w)` at `(x, w)`.
    fn means(self, x: f64, w: f64) -> (f64, f64) {
        let x2 = x * x;
        match self {
            DgpPreset::Linear => {
                let base = 1.0 + 0.5 * x + 0.2 * w;
                (base, base + 0.2 + 0.3 * w + 0.4 * x)
            }
            DgpPreset::Quadratic => {
                let a0 = 0.1 + 0.8 * x - 0.6 * x2;
                let a1 = 0.3 + 0.5 * x + 0.9 * x2;
                let b0 = 0.4 + 0.3 * x + 0.5 * x2;
                let b1 = 0.7 - 0.2 * x - 0.4 * x2;
                (a0 + b0 * w, a1 + b1 * w)
            }
            DgpPreset::Cubic => {
                let a0 = 0.5 * x + 2.0 * x2;
                let a1 = 0.5 + 0.5 * x - 3.0 * x2 + 2.0 * x2 * x;
                (a0 + 0.2 * w, a1 + 0.5 * w)
            }
            DgpPreset::Subgroup => {
                let base = 0.3 + 0.4 * x - 0.5 * x2;
                (base + 0.05 * w, base + 0.05 * w + 0.021 + 0.068 * w)
            }
        }
    }

    /// `κ(w) = θ + ξ w`.
    pub fn kappa_coefficients(self) -> (f64, f64) {
        let (a0, b0) = self.means(0.0, 0.0);
        let (a1, b1) = self.means(0.0, 1.0);
        let theta = b0 - a0;
        (theta, (b1 - a1) - theta)
    }

    /// Population mean of the covariate.
    fn covariate_mean(self) -> f64 {
        0.5
    }

    /// True value behind a reported row.
    pub fn truth(self, mode: ResultMode, label: &str) -> Option<f64> {
        let (theta, xi) = self.kappa_coefficients();
        let name = self.covariate_name();
        match mode {
            ResultMode::Ate => (label == "T").then(|| theta + xi * self.covariate_mean()),
            ResultMode::Generic => {
                if label == "T" {
                    Some(theta)
                } else if label == format!("T#{name}") {
                    Some(xi)
                } else {
                    None
                }
            }
            ResultMode::Subgroup => {
                if label == format!("0.{name}") {
                    Some(theta)
                } else if label == format!("1.{name}") {
                    Some(theta + xi)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for DgpPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgpPreset::Linear => "linear",
            DgpPreset::Quadratic => "quadratic",
            DgpPreset::Cubic => "cubic",
            DgpPreset::Subgroup => "subgroup",
        })
    }
}

impl FromStr for DgpPreset {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        DgpPreset::ALL
            .into_iter()
            .find(|p| p.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                RdError::InvalidConfig(format!("unknown DGP `{s}` (expected linear|quadratic|cubic|subgroup)"))
            })
    }
}

/// Cluster structure: unit `i` belongs to cluster `i mod groups` and
/// receives that cluster's `N(0, sd²)` random effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub groups: usize,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub preset: DgpPreset,
    pub n: usize,
    pub noise_sd: f64,
    pub clusters: Option<ClusterSpec>,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(preset: DgpPreset, n: usize, seed: u64) -> Self {
        DgpSpec {
            preset,
            n,
            noise_sd: preset.default_noise(),
            clusters: None,
            seed,
        }
    }

    fn rng(&self, replication: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replication);
        rng
    }

    /// Draw replication `replication` of the design.
    pub fn generate(&self, replication: u64) -> Result<Sample> {
        if self.n == 0 {
            return Err(RdError::InvalidConfig("sample size must be positive".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(RdError::InvalidConfig("noise sd must be finite and nonnegative".into()));
        }
        let mut rng = self.rng(replication);
        let noise = Normal::new(0.0, self.noise_sd).map_err(|e| RdError::InvalidConfig(e.to_string()))?;
        let effects: Option<Vec<f64>> = match self.clusters {
            Some(c) => {
                if c.groups == 0 {
                    return Err(RdError::InvalidConfig("cluster count must be positive".into()));
                }
                let re = Normal::new(0.0, c.sd).map_err(|e| RdError::InvalidConfig(e.to_string()))?;
                Some((0..c.groups).map(|_| re.sample(&mut rng)).collect())
            }
            None => None,
        };
        let mut x = Vec::with_capacity(self.n);
        let mut w = Vec::with_capacity(self.n);
        let mut y = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let xi: f64 = rng.random_range(-1.0..1.0);
            let wi: f64 = match self.preset {
                DgpPreset::Subgroup => f64::from(u8::from(rng.random_bool(0.5))),
                _ => rng.random(),
            };
            let (m0, m1) = self.preset.means(xi, wi);
            let mut yi = if xi >= 0.0 { m1 } else { m0 } + noise.sample(&mut rng);
            if let (Some(e), Some(c)) = (&effects, self.clusters) {
                yi += e[i % c.groups];
            }
            x.push(xi);
            w.push(wi);
            y.push(yi);
        }
        let clusters = self.clusters.map(|c| (0..self.n).map(|i| i % c.groups).collect());
        Sample::from_columns(
            y,
            x,
            vec![Covariate::numeric(self.preset.covariate_name(), w)],
            vec![],
            clusters,
        )
    }
}

/// Coverage and bias of one reported row across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCoverage {
    pub label: String,
    pub truth: f64,
    /// Replications in which the row was estimated.
    pub replications: usize,
    pub coverage_rbc: f64,
    pub coverage_conventional: f64,
    pub mean_bias_rbc: f64,
    pub mean_bias_conventional: f64,
    pub mean_se: f64,
    pub mean_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub preset: DgpPreset,
    pub mode: Option<ResultMode>,
    pub hetero: Option<String>,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub level: f64,
    /// Replications whose estimation failed; they are left out of `rows`.
    pub failures: usize,
    pub rows: Vec<RowCoverage>,
}

#[derive(Default, Clone)]
struct Acc {
    count: usize,
    hit_rbc: usize,
    hit_conv: usize,
    bias_rbc: f64,
    bias_conv: f64,
    se: f64,
    h: f64,
}

/// Run `replications` draws of `spec`, estimate each with `config` and
/// `hetero`, and tally coverage of the true effects.
pub fn coverage_experiment(
    spec: &DgpSpec,
    config: &EstimationConfig,
    hetero: Option<&str>,
    replications: usize,
) -> Result<CoverageReport> {
    if replications < 100 {
        return Err(RdError::InvalidConfig(format!(
            "coverage experiments need at least 100 replications, got {replications}"
        )));
    }
    config.validate()?;
    let crit = config.critical_value();
    let reps: Vec<u64> = (0..replications as u64).collect();
    let outcomes = par_map(&reps, |&r| {
        let sample = spec.generate(r)?;
        estimate(&sample, hetero, config)
    });

    let mut mode = None;
    let mut labels: Vec<String> = Vec::new();
    let mut accs: Vec<Acc> = Vec::new();
    let mut failures = 0;
    for out in outcomes {
        let res = match out {
            Ok(r) => r,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        mode = Some(res.mode);
        for row in &res.rows {
            let Some(truth) = spec.preset.truth(res.mode, &row.label) else {
                continue;
            };
            let k = match labels.iter().position(|l| *l == row.label) {
                Some(k) => k,
                None => {
                    labels.push(row.label.clone());
                    accs.push(Acc::default());
                    labels.len() - 1
                }
            };
            let a = &mut accs[k];
            a.count += 1;
            // misses within rounding of the truth count as covered, which only
            // matters for noiseless designs where the standard error is itself
            // rounding error
            let slack = 1e-12 * truth.abs().max(1.0);
            let half = crit * row.rbc_se;
            a.hit_rbc += usize::from((row.rbc_estimate - truth).abs() <= half + slack);
            let half = crit * row.conventional_se;
            a.hit_conv += usize::from((row.conventional_estimate - truth).abs() <= half + slack);
            a.bias_rbc += row.rbc_estimate - truth;
            a.bias_conv += row.conventional_estimate - truth;
            a.se += row.rbc_se;
            a.h += row.h;
        }
    }
    let rows = labels
        .into_iter()
        .zip(accs)
        .map(|(label, a)| {
            let m = a.count.max(1) as f64;
            RowCoverage {
                truth: mode.and_then(|md| spec.preset.truth(md, &label)).unwrap_or(f64::NAN),
                label,
                replications: a.count,
                coverage_rbc: a.hit_rbc as f64 / m,
                coverage_conventional: a.hit_conv as f64 / m,
                mean_bias_rbc: a.bias_rbc / m,
                mean_bias_conventional: a.bias_conv / m,
                mean_se: a.se / m,
                mean_h: a.h / m,
            }
        })
        .collect();
    Ok(CoverageReport {
        preset: spec.preset,
        mode,
        hetero: hetero.map(str::to_string),
        n: spec.n,
        replications,
        seed: spec.seed,
        level: config.level,
        failures,
        rows,
    })
}
