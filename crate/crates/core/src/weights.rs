//! Density-ratio weights from a balanced classifier.
//!
//! Observed scores (label 0) and policy-shifted scores (label 1) are stacked
//! with duplicated covariates. Because both halves have n rows, the fitted
//! odds `p̂ / (1 − p̂)` at an observed point estimate the conditional density
//! ratio of shifted to observed scores.
//!
//! Rows of the two halves share covariates and are therefore dependent; only
//! the fitted probabilities are used, never classifier standard errors.

use nalgebra::DMatrix;

use crate::error::{MftpError, Result};
use crate::fgrid::Dataset;
use crate::fpca::FpcaModel;
use crate::glm::{self, IrlsOptions};
use crate::outcome::covariate_matrix;
use crate::policy::{shifted_scores, TreatmentPolicy};

/// Ridge on the standardized classifier slopes, per augmented row. Keeps the
/// IRLS system definite when small folds leave collinear columns.
pub const WEIGHT_RIDGE: f64 = 1e-6;

/// Standardized slope above which the classes are treated as separated.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMap {
    /// Covariates and scores.
    #[default]
    Linear,
    /// Linear terms plus squares and pairwise products of the scores.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapRule {
    /// Quantile of the uncapped weights used as the cap; `None` disables it.
    pub quantile: Option<f64>,
    /// Hard cap, in units of the mean weight.
    pub hard_max: f64,
}

impl Default for CapRule {
    fn default() -> Self {
        CapRule { quantile: Some(0.99), hard_max: 50.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    /// 2n x p; row i and row n+i are identical.
    pub covariates: DMatrix<f64>,
    /// 2n x K; observed scores on top, shifted scores below.
    pub scores: DMatrix<f64>,
    pub labels: Vec<f64>,
    n: usize,
}

impl AugmentedDataset {
    pub fn from_blocks(x: &DMatrix<f64>, observed: &DMatrix<f64>, shifted: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if observed.nrows() != n || shifted.nrows() != n || observed.ncols() != shifted.ncols() {
            return Err(MftpError::Dimension(format!(
                "augmentation blocks: x {}x{}, observed {}x{}, shifted {}x{}",
                x.nrows(),
                x.ncols(),
                observed.nrows(),
                observed.ncols(),
                shifted.nrows(),
                shifted.ncols()
            )));
        }
        let p = x.ncols();
        let k = observed.ncols();
        let mut covariates = DMatrix::zeros(2 * n, p);
        covariates.view_mut((0, 0), (n, p)).copy_from(x);
        covariates.view_mut((n, 0), (n, p)).copy_from(x);
        let mut scores = DMatrix::zeros(2 * n, k);
        scores.view_mut((0, 0), (n, k)).copy_from(observed);
        scores.view_mut((n, 0), (n, k)).copy_from(shifted);
        let labels = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
        Ok(AugmentedDataset { covariates, scores, labels, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.scores.ncols()
    }

    pub fn rows(&self) -> usize {
        2 * self.n
    }

    pub fn feature_dim(&self, map: FeatureMap) -> usize {
        feature_names(self.covariates.ncols(), self.k(), map).len()
    }
}

pub fn build_augmented(
    data: &Dataset,
    model: &FpcaModel,
    policy: &dyn TreatmentPolicy,
    k: usize,
) -> Result<AugmentedDataset> {
    if k > model.n_components() {
        return Err(MftpError::config(
            "K",
            format!("K={k} exceeds the {} retained components", model.n_components()),
        ));
    }
    let model_k = model.with_k(k)?;
    let observed = model_k.project(&data.curves(), k)?;
    let shifted = shifted_scores(policy, &model_k, data)?;
    AugmentedDataset::from_blocks(&covariate_matrix(data), &observed.scores, &shifted.scores)
}

pub fn feature_names(p: usize, k: usize, map: FeatureMap) -> Vec<String> {
    let mut names: Vec<String> = (1..=p).map(|j| format!("X_{j}")).collect();
    names.extend((1..=k).map(|j| format!("A_{j}")));
    if map == FeatureMap::Quadratic {
        for a in 1..=k {
            for b in a..=k {
                names.push(format!("A_{a}*A_{b}"));
            }
        }
    }
    names
}

fn features_row(x: &[f64], scores: &[f64], map: FeatureMap, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    out.extend_from_slice(scores);
    if map == FeatureMap::Quadratic {
        for a in 0..scores.len() {
            for b in a..scores.len() {
                out.push(scores[a] * scores[b]);
            }
        }
    }
}

fn feature_matrix(x: &DMatrix<f64>, scores: &DMatrix<f64>, map: FeatureMap) -> DMatrix<f64> {
    let d = feature_names(x.ncols(), scores.ncols(), map).len();
    let rows = x.nrows();
    let mut m = DMatrix::zeros(rows, d);
    let mut buf = Vec::with_capacity(d);
    let mut xr = vec![0.0; x.ncols()];
    let mut sr = vec![0.0; scores.ncols()];
    for i in 0..rows {
        for (j, v) in xr.iter_mut().enumerate() {
            *v = x[(i, j)];
        }
        for (j, v) in sr.iter_mut().enumerate() {
            *v = scores[(i, j)];
        }
        features_row(&xr, &sr, map, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct WeightModel {
    pub k: usize,
    pub feature_map: FeatureMap,
    pub feature_names: Vec<String>,
    /// Log-odds intercept on the original feature scale.
    pub intercept: f64,
    /// Log-odds slopes on the original feature scale.
    pub coef: Vec<f64>,
    /// Largest allowed weight after mean-one renormalization.
    pub truncation_cap: f64,
    /// ê_{K,i} for the fitting subjects: capped, mean one.
    pub fitted_weights: Vec<f64>,
    pub uncapped_weights: Vec<f64>,
    pub cap_hits: usize,
    /// Multiply the capped odds by this to get `fitted_weights`.
    pub raw_scale: f64,
    pub separation: bool,
    pub cap_rule: CapRule,
}

pub fn fit_weight_model(
    aug: &AugmentedDataset,
    feature_map: FeatureMap,
    cap_rule: CapRule,
) -> Result<WeightModel> {
    let rows = aug.rows();
    let feats = feature_matrix(&aug.covariates, &aug.scores, feature_map);
    let d = feats.ncols();
    // pooled standardization; constant columns are left out of the fit
    let mut keep = Vec::new();
    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let col = feats.column(j);
        let m = col.sum() / rows as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64).sqrt();
        center[j] = m;
        if sd > 1e-12 * (1.0 + m.abs()) {
            scale[j] = sd;
            keep.push(j);
        }
    }
    let std = DMatrix::from_fn(rows, keep.len(), |i, c| {
        let j = keep[c];
        (feats[(i, j)] - center[j]) / scale[j]
    });
    let fit = glm::logistic_irls(
        &std,
        &aug.labels,
        IrlsOptions {
            ridge: WEIGHT_RIDGE * rows as f64,
            separation_bound: SEPARATION_BOUND,
            ..Default::default()
        },
    )?;
    if fit.separation {
        log::warn!("weight model: classes nearly separated; extreme weights will be capped");
    }
    let mut coef = vec![0.0; d];
    let mut intercept = fit.intercept;
    for (c, &j) in keep.iter().enumerate() {
        coef[j] = fit.coef[c] / scale[j];
        intercept -= coef[j] * center[j];
    }
    let names = feature_names(aug.covariates.ncols(), aug.k(), feature_map);
    let mut model = WeightModel {
        k: aug.k(),
        feature_map,
        feature_names: names,
        intercept,
        coef,
        truncation_cap: f64::INFINITY,
        fitted_weights: vec![],
        uncapped_weights: vec![],
        cap_hits: 0,
        raw_scale: 1.0,
        separation: fit.separation,
        cap_rule,
    };
    let n = aug.n();
    let uncapped: Vec<f64> = (0..n)
        .map(|i| {
            let eta = model.intercept
                + model.coef.iter().zip(feats.row(i).iter()).map(|(b, v)| b * v).sum::<f64>();
            eta.exp()
        })
        .collect();
    let capped = cap_and_normalize(&uncapped, cap_rule)?;
    model.fitted_weights = capped.weights;
    model.truncation_cap = capped.cap;
    model.cap_hits = capped.hits;
    model.raw_scale = capped.scale;
    model.uncapped_weights = uncapped;
    Ok(model)
}

impl WeightModel {
    pub fn log_odds(&self, x: &[f64], scores: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.coef.len());
        features_row(x, &scores[..self.k], self.feature_map, &mut buf);
        self.intercept + self.coef.iter().zip(&buf).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Uncapped density ratio at one (covariates, scores) point.
    pub fn ratio(&self, x: &[f64], scores: &[f64]) -> f64 {
        self.log_odds(x, scores).exp()
    }

    /// Capped, mean-one weights for new points (rows of `x` and `scores`).
    pub fn weights_for(&self, x: &DMatrix<f64>, scores: &DMatrix<f64>) -> Result<CappedWeights> {
        let raw: Vec<f64> = (0..x.nrows())
            .map(|i| {
                let xr: Vec<f64> = x.row(i).iter().copied().collect();
                let sr: Vec<f64> = scores.row(i).iter().copied().collect();
                self.ratio(&xr, &sr)
            })
            .collect();
        cap_and_normalize(&raw, self.cap_rule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CappedWeights {
    /// Mean-one weights.
    pub weights: Vec<f64>,
    pub cap: f64,
    pub hits: usize,
    /// Factor taking the capped odds to the mean-one scale.
    pub scale: f64,
}

/// Cap then rescale to mean one.
///
/// Returns the fixed point of "cap at min(q-quantile, hard_max x mean), then
/// renormalize": weights are winsorized at the lower order statistic of the
/// quantile position and then clipped at `hard_max` on the mean-one scale.
/// Applying it to its own output is a no-op.
pub fn cap_and_normalize(raw: &[f64], rule: CapRule) -> Result<CappedWeights> {
    if raw.is_empty() {
        return Err(MftpError::UndefinedEstimate("no weights".into()));
    }
    if let Some(bad) = raw.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(MftpError::Numeric(format!("density ratio {bad} is not positive and finite")));
    }
    if !(rule.hard_max >= 1.0) {
        return Err(MftpError::config("hard_max", "weight cap must be at least 1"));
    }
    let n = raw.len();
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let wins = match rule.quantile {
        Some(q) => sorted[((n - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize],
        None => f64::INFINITY,
    };
    let r: Vec<f64> = raw.iter().map(|v| v.min(wins)).collect();
    let mut rs: Vec<f64> = r.clone();
    rs.sort_by(f64::total_cmp);
    // choose the number k of values clipped at H so that mean(min(s r, H)) = 1
    let h = rule.hard_max;
    let mut rest: f64 = rs.iter().sum();
    let mut scale = n as f64 / rest;
    for k in 0..n {
        let s = (n as f64 - k as f64 * h) / rest;
        if s * rs[n - 1 - k] <= h {
            scale = s;
            break;
        }
        rest -= rs[n - 1 - k];
    }
    let weights: Vec<f64> = r.iter().map(|v| (scale * v).min(h)).collect();
    let cap = weights.iter().cloned().fold(0.0, f64::max);
    let hits = raw.iter().zip(&r).filter(|(a, b)| *a > *b || scale * **b > h).count();
    Ok(CappedWeights { weights, cap, hits, scale })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub features: Vec<String>,
    /// (shifted mean − observed mean) / pooled sd, unweighted.
    pub smd_before: Vec<f64>,
    /// Same with the observed half weighted by ê.
    pub smd_after: Vec<f64>,
    pub ess: f64,
    pub n: usize,
}

pub fn balance_diagnostics(wm: &WeightModel, aug: &AugmentedDataset) -> BalanceReport {
    let n = aug.n();
    let feats = feature_matrix(&aug.covariates, &aug.scores, wm.feature_map);
    let w = &wm.fitted_weights;
    let sw: f64 = w.iter().sum();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for j in 0..feats.ncols() {
        let col = feats.column(j);
        let obs = col.rows(0, n);
        let sh = col.rows(n, n);
        let m0 = obs.sum() / n as f64;
        let m1 = sh.sum() / n as f64;
        let v0 = obs.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n as f64;
        let v1 = sh.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n as f64;
        let sd = (0.5 * (v0 + v1)).sqrt();
        let mw = obs.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw;
        if sd > 0.0 {
            before.push((m1 - m0) / sd);
            after.push((m1 - mw) / sd);
        } else {
            before.push(0.0);
            after.push(0.0);
        }
    }
    BalanceReport {
        features: feature_names(aug.covariates.ncols(), aug.k(), wm.feature_map),
        smd_before: before,
        smd_after: after,
        ess: effective_sample_size(w),
        n,
    }
}

/// (Σw)² / Σw².
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}
