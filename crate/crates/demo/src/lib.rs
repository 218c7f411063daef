//! Browser demo: policy preview, FPCA spectrum and a τ-sweep.
//!
//! The `*_impl` functions are plain Rust and are what the tests call; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

use mftp::estimators::{estimate, EstimatorKind, EstimatorSpec, PreparedData};
use mftp::fgrid::TimeGrid;
use mftp::fpca::{decay_diagnostic, fit_fpca, DecayLaw, FpcaModel, KRule};
use mftp::policy::{ModificationPolicy, TreatmentPolicy, Window};
use mftp::simgen::{default_mean, sample_gp, Kernel, SimConfig};
use mftp::Result;

const PREVIEW_T: usize = 96;
const PREVIEW_CURVES: usize = 3;
const SWEEP_ORACLE_DRAWS: usize = 20_000;

fn js(e: mftp::MftpError) -> JsError {
    JsError::new(&format!("{} error: {e}", e.category()))
}

/// Curves stored row-major, `curves` rows of `grid.len()` values each.
#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct PolicyPreview {
    pub grid: Vec<f64>,
    pub curves: usize,
    pub original: Vec<f64>,
    pub modified: Vec<f64>,
    pub integral_original: Vec<f64>,
    pub integral_modified: Vec<f64>,
    pub description: String,
}

pub fn preview_policy_impl(
    kind: &str,
    tau: f64,
    warp_exponent: f64,
    lo: f64,
    hi: f64,
    threshold: f64,
    renormalize: bool,
    seed: u64,
) -> Result<PolicyPreview> {
    let policy = match kind {
        "identity" => ModificationPolicy::Identity,
        "scale_warp" => ModificationPolicy::scale_warp(tau, warp_exponent)?,
        "window_threshold" => {
            let windows = if lo <= hi {
                vec![Window { lo, hi }]
            } else {
                vec![Window { lo, hi: 1.0 }, Window { lo: 0.0, hi }]
            };
            ModificationPolicy::window_threshold(tau, windows, threshold, renormalize)?
        }
        other => return Err(mftp::MftpError::config("policy.kind", format!("unknown policy kind {other:?}"))),
    };
    let grid = TimeGrid::uniform(PREVIEW_T)?;
    let noise = sample_gp(Kernel::SquaredExponential { sigma: 0.1 }, &grid, PREVIEW_CURVES, seed)?;
    let mut out = PolicyPreview {
        grid: grid.points().to_vec(),
        curves: PREVIEW_CURVES,
        original: Vec::new(),
        modified: Vec::new(),
        integral_original: Vec::new(),
        integral_modified: Vec::new(),
        description: policy.describe(),
    };
    for z in &noise {
        let curve: Vec<f64> = grid.points().iter().zip(z).map(|(&t, v)| default_mean(t) + v).collect();
        let shifted = policy.apply(&grid, &[], &curve)?;
        out.integral_original.push(grid.integrate(&curve)?);
        out.integral_modified.push(grid.integrate(&shifted)?);
        out.original.extend(curve);
        out.modified.extend(shifted);
    }
    Ok(out)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn preview_policy(
    kind: &str,
    tau: f64,
    warp_exponent: f64,
    lo: f64,
    hi: f64,
    threshold: f64,
    renormalize: bool,
    seed: u32,
) -> std::result::Result<PolicyPreview, JsError> {
    preview_policy_impl(kind, tau, warp_exponent, lo, hi, threshold, renormalize, seed as u64).map_err(js)
}

#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Δ_K / Σθ for K = 0, 1, ...
    pub tail_fraction: Vec<f64>,
    pub k_selected: usize,
    pub law: String,
    pub slope: f64,
}

fn kernel_from(name: &str, param: f64) -> Result<Kernel> {
    let k = match name {
        "se" => Kernel::SquaredExponential { sigma: param },
        "matern" => Kernel::Matern { nu: 0.5, rho: param },
        "wiener" => Kernel::Wiener,
        other => return Err(mftp::MftpError::config("kernel", format!("unknown kernel {other:?}"))),
    };
    k.validate()?;
    Ok(k)
}

pub fn fpca_spectrum_impl(kernel: &str, param: f64, n: usize, t: usize, seed: u64) -> Result<Spectrum> {
    let grid = TimeGrid::uniform(t)?;
    let curves = sample_gp(kernel_from(kernel, param)?, &grid, n, seed)?;
    let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
    let model = FpcaModel::fit(&grid, &refs, KRule::VarianceFraction(0.95))?;
    let total = model.total_variance();
    let (law, slope) = match decay_diagnostic(&model) {
        Ok(r) => {
            let name = match r.law {
                DecayLaw::Exponential => "exponential",
                DecayLaw::Polynomial => "polynomial",
                DecayLaw::FiniteRank => "finite rank",
            };
            (name.to_string(), r.slope)
        }
        Err(mftp::MftpError::DiagnosticUnavailable(_)) => ("unavailable".into(), f64::NAN),
        Err(e) => return Err(e),
    };
    Ok(Spectrum {
        eigenvalues: model.eigenvalues().to_vec(),
        tail_fraction: model.tail_residuals().iter().map(|d| d / total).collect(),
        k_selected: model.k(),
        law,
        slope,
    })
}

#[wasm_bindgen]
pub fn fpca_spectrum(kernel: &str, param: f64, n: usize, t: usize, seed: u32) -> std::result::Result<Spectrum, JsError> {
    fpca_spectrum_impl(kernel, param, n, t, seed as u64).map_err(js)
}

/// One row per τ; NaN marks an estimator that failed at that τ.
#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct Sweep {
    pub taus: Vec<f64>,
    pub truth: Vec<f64>,
    pub or: Vec<f64>,
    pub ipw: Vec<f64>,
    pub aipw: Vec<f64>,
    pub sample_mean: f64,
}

pub fn tau_sweep_impl(scenario: u8, n: usize, taus: &[f64], seed: u64) -> Result<Sweep> {
    let cfg = SimConfig { n, seed, ..SimConfig::scenario(scenario)? };
    let pop = cfg.population()?;
    let data = pop.dataset(n, seed)?;
    let basis = fit_fpca(&data, KRule::VarianceFraction(cfg.variance_fraction))?;
    let k_m = basis.k();
    let base = EstimatorSpec { folds: cfg.folds, seed, ..EstimatorSpec::new(EstimatorKind::Aipw, cfg.k, k_m) };
    let mut out = Sweep {
        taus: taus.to_vec(),
        truth: Vec::new(),
        or: Vec::new(),
        ipw: Vec::new(),
        aipw: Vec::new(),
        sample_mean: data.mean_outcome(),
    };
    for &tau in taus {
        let policy = cfg.policy.with_tau(tau)?;
        out.truth.push(pop.oracle_truth(&policy, SWEEP_ORACLE_DRAWS, seed ^ 0x7A7)?.value);
        let prep = PreparedData::new(&data, &basis, &policy, base.columns())?;
        let point = |kind| estimate(&prep, &base.with_kind(kind)).map(|e| e.point).unwrap_or(f64::NAN);
        out.or.push(point(EstimatorKind::Or));
        out.ipw.push(point(EstimatorKind::IpwHajek));
        out.aipw.push(point(EstimatorKind::Aipw));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn tau_sweep(scenario: u8, n: usize, taus: Vec<f64>, seed: u32) -> std::result::Result<Sweep, JsError> {
    tau_sweep_impl(scenario, n, &taus, seed as u64).map_err(js)
}
