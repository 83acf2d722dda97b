//! Localization kernels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Triangular,
    Uniform,
    Epanechnikov,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Triangular, KernelKind::Uniform, KernelKind::Epanechnikov];

    /// K(u), supported on [-1, 1].
    pub fn value(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        match self {
            KernelKind::Triangular => 1.0 - a,
            KernelKind::Uniform => 0.5,
            KernelKind::Epanechnikov => 0.75 * (1.0 - u * u),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Triangular => "triangular",
            KernelKind::Uniform => "uniform",
            KernelKind::Epanechnikov => "epanechnikov",
        })
    }
}

impl FromStr for KernelKind {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "triangular" | "tri" => Ok(KernelKind::Triangular),
            "uniform" | "uni" => Ok(KernelKind::Uniform),
            "epanechnikov" | "epa" => Ok(KernelKind::Epanechnikov),
            other => Err(RdError::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

pub fn kernel_value(kind: KernelKind, u: f64) -> f64 {
    kind.value(u)
}

/// Weights `K((x_i - c)/h)`. The `1/h` factor of `K_h` is left out: least
/// squares estimates and sandwich variances do not depend on a common
/// positive rescaling of the weights.
pub fn localization_weights(kind: KernelKind, x: &[f64], cutoff: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(RdError::NonpositiveBandwidth(h));
    }
    Ok(x.iter().map(|&xi| kind.value((xi - cutoff) / h)).collect())
}
