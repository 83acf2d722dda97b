//! WebAssembly bindings behind the browser demo in `www/`.
//!
//! Each operation simulates one sample from a preset design, runs the
//! estimator and returns a JSON document for the page to draw. The plain
//! Rust functions are exported as well so they can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rdhetero::bandwidth::resolve_policy;
use rdhetero::data::Sample;
use rdhetero::design::{control_name, treated_name, WCoding};
use rdhetero::estimator::{
    cate_at, estimate, rbc_pair, BandwidthPolicy, EstimationConfig, LocalData, RdResult, ResultMode,
};
use rdhetero::kernel::KernelKind;
use rdhetero::montecarlo::{DgpPreset, DgpSpec};

const MAX_POINTS: usize = 800;
const BINS_PER_SIDE: usize = 20;

#[derive(Serialize)]
struct Row {
    label: String,
    conventional: f64,
    rbc: f64,
    se: f64,
    ci: [f64; 2],
    h: f64,
}

#[derive(Serialize)]
struct Bin {
    x: f64,
    y: f64,
    n: usize,
}

#[derive(Serialize)]
struct ScatterFit {
    h: f64,
    truth: f64,
    points: Vec<[f64; 2]>,
    bins: Vec<Bin>,
    left: Vec<[f64; 2]>,
    right: Vec<[f64; 2]>,
    rows: Vec<Row>,
}

#[derive(Serialize)]
struct CurvePoint {
    w: f64,
    estimate: f64,
    lo: f64,
    hi: f64,
    truth: f64,
}

#[derive(Serialize)]
struct CateCurve {
    h: f64,
    rows: Vec<Row>,
    curve: Vec<CurvePoint>,
}

#[derive(Serialize)]
struct SensitivityPoint {
    h: f64,
    conventional: f64,
    conventional_ci: [f64; 2],
    rbc: f64,
    rbc_ci: [f64; 2],
}

#[derive(Serialize)]
struct Sensitivity {
    h_opt: f64,
    truth: f64,
    grid: Vec<SensitivityPoint>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn draw(preset: &str, n: usize, seed: u64, noise: f64) -> Result<(DgpPreset, Sample), String> {
    let preset: DgpPreset = preset.parse().map_err(err)?;
    let mut spec = DgpSpec::new(preset, n, seed);
    if noise >= 0.0 {
        spec.noise_sd = noise;
    }
    Ok((preset, spec.generate(0).map_err(err)?))
}

fn config(kernel: &str, p: usize, h: f64) -> Result<EstimationConfig, String> {
    let kernel: KernelKind = kernel.parse().map_err(err)?;
    let bandwidth = if h > 0.0 {
        BandwidthPolicy::Manual { h, joint: false }
    } else {
        BandwidthPolicy::Auto { joint: false }
    };
    Ok(EstimationConfig {
        kernel,
        p,
        bandwidth,
        ..Default::default()
    })
}

fn rows(result: &RdResult) -> Vec<Row> {
    result
        .rows
        .iter()
        .map(|r| Row {
            label: r.label.clone(),
            conventional: r.conventional_estimate,
            rbc: r.rbc_estimate,
            se: r.rbc_se,
            ci: r.ci,
            h: r.h,
        })
        .collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(err)
}

/// Average-effect fit on one simulated sample: scatter, binned means and the
/// fitted local polynomial on each side of the cutoff. `h <= 0` selects the
/// bandwidth from the data; `noise < 0` keeps the preset's noise level.
pub fn scatter_fit_json(
    preset: &str,
    n: usize,
    seed: u64,
    noise: f64,
    kernel: &str,
    p: usize,
    h: f64,
) -> Result<String, String> {
    let (preset, sample) = draw(preset, n, seed, noise)?;
    let cfg = config(kernel, p, h)?;
    let result = estimate(&sample, None, &cfg).map_err(err)?;
    let h = result.rows[0].h;

    let data = LocalData::from_sample(&sample, 0.0, None, WCoding::Standard);
    let pair = rbc_pair(&data, h, &cfg).map_err(err)?;
    let fit = &pair.conventional;
    let poly = |x: f64, name: fn(usize) -> String| -> f64 {
        (0..=p)
            .map(|j| fit.coef(&name(j)).unwrap_or(0.0) * x.powi(j as i32))
            .sum()
    };
    let lo = sample.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sample.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let steps = 60;
    let left: Vec<[f64; 2]> = (0..=steps)
        .map(|k| -h.min(-lo) * (1.0 - k as f64 / steps as f64))
        .map(|x| [x, poly(x, control_name)])
        .collect();
    let right: Vec<[f64; 2]> = (0..=steps)
        .map(|k| h.min(hi) * k as f64 / steps as f64)
        .map(|x| [x, poly(x, control_name) + poly(x, treated_name)])
        .collect();

    let stride = sample.n().div_ceil(MAX_POINTS).max(1);
    let points = (0..sample.n())
        .step_by(stride)
        .map(|i| [sample.x[i], sample.y[i]])
        .collect();

    let width = (hi - lo) / (2 * BINS_PER_SIDE) as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); 2 * BINS_PER_SIDE];
    for (&x, &y) in sample.x.iter().zip(&sample.y) {
        let b = (((x - lo) / width) as usize).min(2 * BINS_PER_SIDE - 1);
        sums[b].0 += x;
        sums[b].1 += y;
        sums[b].2 += 1;
    }
    let bins = sums
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(sx, sy, c)| Bin {
            x: sx / c as f64,
            y: sy / c as f64,
            n: c,
        })
        .collect();

    to_json(&ScatterFit {
        h,
        truth: preset.truth(ResultMode::Ate, "T").unwrap_or(f64::NAN),
        points,
        bins,
        left,
        right,
        rows: rows(&result),
    })
}

/// Conditional effect `κ̂(w) = θ̂ + ξ̂ w` over `w ∈ [0, 1]` with pointwise
/// bias-corrected confidence bands.
pub fn cate_curve_json(
    preset: &str,
    n: usize,
    seed: u64,
    noise: f64,
    kernel: &str,
    p: usize,
    h: f64,
) -> Result<String, String> {
    let (preset, sample) = draw(preset, n, seed, noise)?;
    let cfg = config(kernel, p, h)?;
    let result = estimate(&sample, Some("c.w"), &cfg).map_err(err)?;
    if result.rows.len() != 2 {
        return Err("the slope in w could not be estimated".into());
    }
    let (theta, xi) = preset.kappa_coefficients();
    let curve = (0..=40)
        .map(|k| {
            let w = k as f64 / 40.0;
            let inf = cate_at(&result, &[w]).map_err(err)?;
            Ok(CurvePoint {
                w,
                estimate: inf.estimate,
                lo: inf.ci[0],
                hi: inf.ci[1],
                truth: theta + xi * w,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&CateCurve {
        h: result.rows[0].h,
        rows: rows(&result),
        curve,
    })
}

/// Average-effect estimates over bandwidths from half to twice the
/// MSE-optimal choice.
pub fn bandwidth_sensitivity_json(
    preset: &str,
    n: usize,
    seed: u64,
    noise: f64,
    kernel: &str,
    p: usize,
) -> Result<String, String> {
    let (preset, sample) = draw(preset, n, seed, noise)?;
    let auto = config(kernel, p, 0.0)?;
    let bw = resolve_policy(&sample, None, &auto).map_err(err)?;
    let h_opt = bw.get("T").ok_or("no bandwidth could be selected")?;
    let crit = auto.critical_value();
    let mut grid = Vec::new();
    for k in 0..=15 {
        let h = h_opt * 2f64.powf(-1.0 + 2.0 * k as f64 / 15.0);
        let cfg = config(kernel, p, h)?;
        // bandwidths too small for the design are skipped
        let Ok(r) = estimate(&sample, None, &cfg) else {
            continue;
        };
        let row = &r.rows[0];
        let half = crit * row.conventional_se;
        grid.push(SensitivityPoint {
            h,
            conventional: row.conventional_estimate,
            conventional_ci: [row.conventional_estimate - half, row.conventional_estimate + half],
            rbc: row.rbc_estimate,
            rbc_ci: row.ci,
        });
    }
    to_json(&Sensitivity {
        h_opt,
        truth: preset.truth(ResultMode::Ate, "T").unwrap_or(f64::NAN),
        grid,
    })
}

#[wasm_bindgen]
pub fn scatter_fit(
    preset: &str,
    n: u32,
    seed: u32,
    noise: f64,
    kernel: &str,
    p: u32,
    h: f64,
) -> Result<String, JsValue> {
    scatter_fit_json(preset, n as usize, seed.into(), noise, kernel, p as usize, h).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cate_curve(
    preset: &str,
    n: u32,
    seed: u32,
    noise: f64,
    kernel: &str,
    p: u32,
    h: f64,
) -> Result<String, JsValue> {
    cate_curve_json(preset, n as usize, seed.into(), noise, kernel, p as usize, h).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bandwidth_sensitivity(
    preset: &str,
    n: u32,
    seed: u32,
    noise: f64,
    kernel: &str,
    p: u32,
) -> Result<String, JsValue> {
    bandwidth_sensitivity_json(preset, n as usize, seed.into(), noise, kernel, p as usize)
        .map_err(|e| JsValue::from_str(&e))
}
