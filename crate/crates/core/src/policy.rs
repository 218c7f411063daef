//! Treatment modification policies `q(x, a(·))` and their application.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MftpError, Result};
use crate::fgrid::{l2_distance, Dataset, FunctionalSample, TimeGrid};
use crate::fpca::{FpcaModel, ScoreMatrix};

/// Anything that maps an observed curve (and covariates) to a modified curve
/// on the same grid.
pub trait TreatmentPolicy: Send + Sync {
    fn apply(&self, grid: &TimeGrid, covariates: &[f64], curve: &[f64]) -> Result<Vec<f64>>;

    /// True when the policy leaves every curve untouched.
    fn is_identity(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

/// Closed interval in normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }
}

/// The declarative policy kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModificationPolicy {
    Identity,
    /// `τ · a(t^e)`, with `a` linearly interpolated at the warped time.
    ScaleWarp { tau: f64, warp_exponent: f64 },
    /// Inside the windows, values below `threshold` are multiplied by `τ`;
    /// optionally the whole curve is then rescaled by `c_q` so its integral
    /// is unchanged. Several windows express wrap-around clock intervals.
    WindowThreshold { tau: f64, windows: Vec<Window>, threshold: f64, renormalize: bool },
}

impl ModificationPolicy {
    pub fn scale_warp(tau: f64, warp_exponent: f64) -> Result<Self> {
        let p = ModificationPolicy::ScaleWarp { tau, warp_exponent };
        p.validate()?;
        Ok(p)
    }

    pub fn window_threshold(
        tau: f64,
        windows: Vec<Window>,
        threshold: f64,
        renormalize: bool,
    ) -> Result<Self> {
        let p = ModificationPolicy::WindowThreshold { tau, windows, threshold, renormalize };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModificationPolicy::Identity => Ok(()),
            ModificationPolicy::ScaleWarp { tau, warp_exponent } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(MftpError::config("policy.tau", format!("tau > 0 required, got {tau}")));
                }
                if !(*warp_exponent > 0.0 && warp_exponent.is_finite()) {
                    return Err(MftpError::config(
                        "policy.warp_exponent",
                        format!("warp exponent > 0 required, got {warp_exponent}"),
                    ));
                }
                Ok(())
            }
            ModificationPolicy::WindowThreshold { tau, windows, threshold, .. } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(MftpError::config("policy.tau", format!("tau > 0 required, got {tau}")));
                }
                if !threshold.is_finite() {
                    return Err(MftpError::config("policy.threshold", "threshold must be finite"));
                }
                if windows.is_empty() {
                    return Err(MftpError::config("policy.window", "at least one window required"));
                }
                for w in windows {
                    if !(0.0 <= w.lo && w.lo < w.hi && w.hi <= 1.0) {
                        return Err(MftpError::config(
                            "policy.window",
                            format!("need 0 <= lo < hi <= 1, got [{}, {}]", w.lo, w.hi),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// Same policy with a different `τ` (identity stays identity).
    pub fn with_tau(&self, new_tau: f64) -> Result<Self> {
        let p = match self.clone() {
            ModificationPolicy::Identity => ModificationPolicy::Identity,
            ModificationPolicy::ScaleWarp { warp_exponent, .. } => {
                ModificationPolicy::ScaleWarp { tau: new_tau, warp_exponent }
            }
            ModificationPolicy::WindowThreshold { windows, threshold, renormalize, .. } => {
                ModificationPolicy::WindowThreshold { tau: new_tau, windows, threshold, renormalize }
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            ModificationPolicy::Identity => None,
            ModificationPolicy::ScaleWarp { tau, .. } | ModificationPolicy::WindowThreshold { tau, .. } => {
                Some(*tau)
            }
        }
    }
}

impl TreatmentPolicy for ModificationPolicy {
    fn apply(&self, grid: &TimeGrid, _covariates: &[f64], curve: &[f64]) -> Result<Vec<f64>> {
        grid.check_len(curve.len())?;
        match self {
            ModificationPolicy::Identity => Ok(curve.to_vec()),
            ModificationPolicy::ScaleWarp { tau, warp_exponent } => Ok(grid
                .points()
                .iter()
                .map(|&t| tau * grid.interpolate(curve, t.powf(*warp_exponent).clamp(0.0, 1.0)))
                .collect()),
            ModificationPolicy::WindowThreshold { tau, windows, threshold, renormalize } => {
                let mut out: Vec<f64> = grid
                    .points()
                    .iter()
                    .zip(curve)
                    .map(|(&t, &a)| {
                        if a < *threshold && windows.iter().any(|w| w.contains(t)) {
                            tau * a
                        } else {
                            a
                        }
                    })
                    .collect();
                if *renormalize {
                    let target = grid.integrate(curve)?;
                    let modified = grid.integrate(&out)?;
                    if modified <= 0.0 {
                        return Err(MftpError::RenormalizationUndefined(modified));
                    }
                    let c = target / modified;
                    out.iter_mut().for_each(|v| *v *= c);
                }
                Ok(out)
            }
        }
    }

    fn is_identity(&self) -> bool {
        matches!(self, ModificationPolicy::Identity)
    }

    fn describe(&self) -> String {
        match self {
            ModificationPolicy::Identity => "identity".into(),
            ModificationPolicy::ScaleWarp { tau, warp_exponent } => {
                format!("scale_warp(tau={tau}, exponent={warp_exponent})")
            }
            ModificationPolicy::WindowThreshold { tau, windows, threshold, renormalize } => {
                let w: Vec<String> = windows.iter().map(|w| format!("[{}, {}]", w.lo, w.hi)).collect();
                format!(
                    "window_threshold(tau={tau}, windows={}, threshold={threshold}, renormalize={renormalize})",
                    w.join("+")
                )
            }
        }
    }
}

/// Adds a fixed curve to every subject's treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveShift {
    pub delta: Vec<f64>,
}

impl AdditiveShift {
    /// Shift that moves standardized score `j` by `amount` under `model`.
    pub fn along_component(model: &FpcaModel, j: usize, amount: f64) -> Self {
        let scale = amount * model.eigenvalues()[j].sqrt();
        AdditiveShift { delta: model.eigenfunction(j).iter().map(|p| scale * p).collect() }
    }
}

impl TreatmentPolicy for AdditiveShift {
    fn apply(&self, grid: &TimeGrid, _covariates: &[f64], curve: &[f64]) -> Result<Vec<f64>> {
        grid.check_len(curve.len())?;
        grid.check_len(self.delta.len())?;
        Ok(curve.iter().zip(&self.delta).map(|(a, d)| a + d).collect())
    }

    fn describe(&self) -> String {
        "additive_shift".into()
    }
}

pub fn apply_policy(
    policy: &dyn TreatmentPolicy,
    sample: &FunctionalSample,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    policy.apply(grid, &sample.covariates, &sample.values)
}

/// Modified curves for every subject, in order.
pub fn shifted_curves(policy: &dyn TreatmentPolicy, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let grid = data.grid();
    data.samples().par_iter().map(|s| apply_policy(policy, s, grid)).collect()
}

/// Scores of the modified curves on the observed-treatment basis.
pub fn shifted_scores(
    policy: &dyn TreatmentPolicy,
    model: &FpcaModel,
    data: &Dataset,
) -> Result<ScoreMatrix> {
    let curves = shifted_curves(policy, data)?;
    let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
    model.project(&refs, model.k())
}

/// Column-wise mean of squared scores; bounded values support finite
/// second moments of the shifted scores.
pub fn second_moments(scores: &ScoreMatrix) -> Vec<f64> {
    let n = scores.nrows() as f64;
    scores.scores.column_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect()
}

/// Largest observed ratio ‖q(a₁) − q(a₂)‖ / ‖a₁ − a₂‖ over the given pairs.
pub fn lipschitz_estimate(
    policy: &dyn TreatmentPolicy,
    grid: &TimeGrid,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    let mut best = 0.0f64;
    for (a, b) in pairs {
        let d = l2_distance(a, b, grid)?;
        if d == 0.0 {
            continue;
        }
        let qa = policy.apply(grid, &[], a)?;
        let qb = policy.apply(grid, &[], b)?;
        best = best.max(l2_distance(&qa, &qb, grid)? / d);
    }
    Ok(best)
}
