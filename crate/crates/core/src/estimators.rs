//! Outcome-regression, weighting and cross-fitted doubly robust estimators of
//! the mean outcome under a treatment policy, with bootstrap intervals.
//!
//! Everything downstream of the basis works on [`PreparedData`]: observed and
//! policy-shifted scores are computed once, so cross-fitting and bootstrap
//! resampling only shuffle rows.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MftpError, Result};
use crate::fgrid::Dataset;
use crate::fpca::{FpcaModel, KRule};
use crate::glm::LambdaRule;
use crate::outcome::{covariate_matrix, LinearPredictor, Link, OutcomeModel};
use crate::policy::{shifted_curves, TreatmentPolicy};
use crate::util::{derive_seed, mean, quantile_sorted, variance};
use crate::weights::{fit_weight_model, AugmentedDataset, CapRule, FeatureMap, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Or,
    IpwHajek,
    IpwPlain,
    Aipw,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::Or, EstimatorKind::IpwHajek, EstimatorKind::IpwPlain, EstimatorKind::Aipw];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Or => "OR",
            EstimatorKind::IpwHajek => "IPW_hajek",
            EstimatorKind::IpwPlain => "IPW_plain",
            EstimatorKind::Aipw => "AIPW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "or" => Some(EstimatorKind::Or),
            "ipw" | "ipw_hajek" | "hajek" => Some(EstimatorKind::IpwHajek),
            "ipw_plain" | "plain" => Some(EstimatorKind::IpwPlain),
            "aipw" | "dr" => Some(EstimatorKind::Aipw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpwMode {
    Hajek,
    Plain,
}

/// Settings shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Scores used by the weight model.
    pub k: usize,
    /// Scores used by the outcome model.
    pub k_m: usize,
    pub folds: usize,
    pub feature_map: FeatureMap,
    pub cap_rule: CapRule,
    pub lambda_rule: LambdaRule,
    /// Seed for the cross-fitting partition.
    pub seed: u64,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, k: usize, k_m: usize) -> Self {
        EstimatorSpec {
            kind,
            k,
            k_m,
            folds: 2,
            feature_map: FeatureMap::Linear,
            cap_rule: CapRule::default(),
            lambda_rule: LambdaRule::Gcv,
            seed: 0,
        }
    }

    pub fn with_kind(self, kind: EstimatorKind) -> Self {
        EstimatorSpec { kind, ..self }
    }

    pub fn columns(&self) -> usize {
        self.k.max(self.k_m)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub weight_min: Option<f64>,
    pub weight_max: Option<f64>,
    pub ess: Option<f64>,
    pub cap_hits: usize,
    pub separation: bool,
    /// Δ_K of the basis at the weighting K.
    pub tail_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MftpEstimate {
    pub estimator: EstimatorKind,
    pub point: f64,
    pub ci: Option<(f64, f64)>,
    pub alpha: Option<f64>,
    pub n: usize,
    pub k: usize,
    pub k_m: usize,
    pub folds: usize,
    pub bootstrap_b: usize,
    pub bootstrap_skipped: usize,
    /// var(per-subject contributions) / n, AIPW only.
    pub variance_plugin: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl MftpEstimate {
    fn bare(kind: EstimatorKind, point: f64, n: usize, spec: &EstimatorSpec) -> Self {
        MftpEstimate {
            estimator: kind,
            point,
            ci: None,
            alpha: None,
            n,
            k: spec.k,
            k_m: spec.k_m,
            folds: if kind == EstimatorKind::Aipw { spec.folds } else { 0 },
            bootstrap_b: 0,
            bootstrap_skipped: 0,
            variance_plugin: None,
            diagnostics: Diagnostics::default(),
        }
    }
}

/// Outcomes, covariates, and observed/shifted scores on a fixed basis.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub observed: DMatrix<f64>,
    pub shifted: DMatrix<f64>,
    pub link: Link,
    /// Δ_K for K = 0..=J of the basis.
    pub tail_residuals: Vec<f64>,
}

impl PreparedData {
    /// Projects observed and policy-modified curves onto the first `cols`
    /// components of `basis`.
    pub fn new(
        data: &Dataset,
        basis: &FpcaModel,
        policy: &dyn TreatmentPolicy,
        cols: usize,
    ) -> Result<Self> {
        if cols > basis.n_components() {
            return Err(MftpError::config(
                "K",
                format!("{cols} components requested, basis retains {}", basis.n_components()),
            ));
        }
        let observed = basis.project(&data.curves(), cols)?.scores;
        let modified = shifted_curves(policy, data)?;
        let refs: Vec<&[f64]> = modified.iter().map(|c| c.as_slice()).collect();
        let shifted = basis.project(&refs, cols)?.scores;
        Ok(PreparedData {
            y: data.outcomes(),
            x: covariate_matrix(data),
            observed,
            shifted,
            link: data.outcome_kind().into(),
            tail_residuals: basis.tail_residuals(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn columns(&self) -> usize {
        self.observed.ncols()
    }

    /// Rows `idx`, repeats allowed.
    pub fn subset(&self, idx: &[usize]) -> PreparedData {
        PreparedData {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx),
            observed: self.observed.select_rows(idx),
            shifted: self.shifted.select_rows(idx),
            link: self.link,
            tail_residuals: self.tail_residuals.clone(),
        }
    }

    fn check(&self, spec: &EstimatorSpec) -> Result<()> {
        if spec.columns() > self.columns() {
            return Err(MftpError::config(
                "K",
                format!("estimator needs {} scores, data has {}", spec.columns(), self.columns()),
            ));
        }
        if self.n() < 2 {
            return Err(MftpError::InsufficientData(format!("{} subjects", self.n())));
        }
        Ok(())
    }

    fn tail(&self, k: usize) -> f64 {
        self.tail_residuals.get(k).copied().unwrap_or(0.0)
    }
}

fn cols(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    m.columns(0, k).into_owned()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn fit_outcome_predictor(prep: &PreparedData, spec: &EstimatorSpec) -> Result<LinearPredictor> {
    LinearPredictor::fit(&cols(&prep.observed, spec.k_m), &prep.x, &prep.y, prep.link, spec.lambda_rule)
}

pub fn fit_weights(prep: &PreparedData, spec: &EstimatorSpec) -> Result<WeightModel> {
    let aug = AugmentedDataset::from_blocks(
        &prep.x,
        &cols(&prep.observed, spec.k),
        &cols(&prep.shifted, spec.k),
    )?;
    fit_weight_model(&aug, spec.feature_map, spec.cap_rule)
}

fn predictions(pred: &LinearPredictor, scores: &DMatrix<f64>, x: &DMatrix<f64>, k_m: usize) -> Vec<f64> {
    (0..scores.nrows())
        .map(|i| {
            let s: Vec<f64> = scores.row(i).iter().take(k_m).copied().collect();
            pred.predict(&s, &row(x, i))
        })
        .collect()
}

/// Outcome-regression estimate on prepared data.
pub fn or_on(prep: &PreparedData, spec: &EstimatorSpec) -> Result<MftpEstimate> {
    prep.check(spec)?;
    let pred = fit_outcome_predictor(prep, spec)?;
    let point = mean(&predictions(&pred, &prep.shifted, &prep.x, spec.k_m));
    let mut est = MftpEstimate::bare(EstimatorKind::Or, point, prep.n(), spec);
    est.diagnostics.tail_residual = prep.tail(spec.k);
    Ok(est)
}

fn ipw_point(y: &[f64], wm: &WeightModel, mode: IpwMode) -> Result<f64> {
    let w = &wm.fitted_weights;
    if w.len() != y.len() {
        return Err(MftpError::Dimension(format!("{} weights for {} outcomes", w.len(), y.len())));
    }
    match mode {
        IpwMode::Hajek => {
            let sw: f64 = w.iter().sum();
            if !(sw > 0.0) {
                return Err(MftpError::UndefinedEstimate("sum of weights is zero".into()));
            }
            Ok(w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw)
        }
        // capped odds on their own scale, averaged with 1/n
        IpwMode::Plain => Ok(w.iter().zip(y).map(|(a, b)| a / wm.raw_scale * b).sum::<f64>() / y.len() as f64),
    }
}

fn weight_diagnostics(wm: &WeightModel, tail: f64) -> Diagnostics {
    let w = &wm.fitted_weights;
    Diagnostics {
        weight_min: w.iter().cloned().reduce(f64::min),
        weight_max: w.iter().cloned().reduce(f64::max),
        ess: Some(crate::weights::effective_sample_size(w)),
        cap_hits: wm.cap_hits,
        separation: wm.separation,
        tail_residual: tail,
    }
}

pub fn ipw_on(prep: &PreparedData, spec: &EstimatorSpec, mode: IpwMode) -> Result<MftpEstimate> {
    prep.check(spec)?;
    let wm = fit_weights(prep, spec)?;
    let kind = match mode {
        IpwMode::Hajek => EstimatorKind::IpwHajek,
        IpwMode::Plain => EstimatorKind::IpwPlain,
    };
    let mut est = MftpEstimate::bare(kind, ipw_point(&prep.y, &wm, mode)?, prep.n(), spec);
    est.diagnostics = weight_diagnostics(&wm, prep.tail(spec.k));
    Ok(est)
}

/// Nuisance predictions for one evaluation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPredictions {
    /// m̂(X_i, A_i).
    pub m_observed: Vec<f64>,
    /// m̂(X_i, A_i^q).
    pub m_shifted: Vec<f64>,
    /// ê_{K,i}.
    pub weights: Vec<f64>,
    pub cap_hits: usize,
    pub separation: bool,
}

/// Supplies cross-fitted nuisances; the default fits both models on the
/// training rows, tests can inject known functions.
pub trait NuisanceFitter: Sync {
    fn predict_fold(
        &self,
        prep: &PreparedData,
        spec: &EstimatorSpec,
        train: &[usize],
        eval: &[usize],
    ) -> Result<FoldPredictions>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ModelNuisance;

impl NuisanceFitter for ModelNuisance {
    fn predict_fold(
        &self,
        prep: &PreparedData,
        spec: &EstimatorSpec,
        train: &[usize],
        eval: &[usize],
    ) -> Result<FoldPredictions> {
        let tr = prep.subset(train);
        let ev = prep.subset(eval);
        let pred = fit_outcome_predictor(&tr, spec)?;
        let wm = fit_weights(&tr, spec)?;
        let w = wm.weights_for(&ev.x, &cols(&ev.observed, spec.k))?;
        Ok(FoldPredictions {
            m_observed: predictions(&pred, &ev.observed, &ev.x, spec.k_m),
            m_shifted: predictions(&pred, &ev.shifted, &ev.x, spec.k_m),
            weights: w.weights,
            cap_hits: w.hits,
            separation: wm.separation,
        })
    }
}

/// Known per-subject nuisance values (indexed like the prepared rows).
/// Missing pieces fall back to fitted models.
#[derive(Debug, Clone, Default)]
pub struct OracleNuisance {
    pub m_observed: Option<Vec<f64>>,
    pub m_shifted: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl NuisanceFitter for OracleNuisance {
    fn predict_fold(
        &self,
        prep: &PreparedData,
        spec: &EstimatorSpec,
        train: &[usize],
        eval: &[usize],
    ) -> Result<FoldPredictions> {
        let needs_fit = self.m_observed.is_none() || self.m_shifted.is_none() || self.weights.is_none();
        let mut out = if needs_fit {
            ModelNuisance.predict_fold(prep, spec, train, eval)?
        } else {
            FoldPredictions {
                m_observed: vec![],
                m_shifted: vec![],
                weights: vec![],
                cap_hits: 0,
                separation: false,
            }
        };
        let pick = |v: &Vec<f64>| eval.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        if let Some(v) = &self.m_observed {
            out.m_observed = pick(v);
        }
        if let Some(v) = &self.m_shifted {
            out.m_shifted = pick(v);
        }
        if let Some(v) = &self.weights {
            out.weights = pick(v);
            out.cap_hits = 0;
        }
        Ok(out)
    }
}

/// Seeded, size-balanced partition of `0..n` into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut out = vec![Vec::with_capacity(n / folds + 1); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

pub fn aipw_on(prep: &PreparedData, spec: &EstimatorSpec) -> Result<MftpEstimate> {
    aipw_with(prep, spec, &ModelNuisance)
}

pub fn aipw_with(
    prep: &PreparedData,
    spec: &EstimatorSpec,
    nuisance: &dyn NuisanceFitter,
) -> Result<MftpEstimate> {
    prep.check(spec)?;
    let n = prep.n();
    if !(2..=10).contains(&spec.folds) {
        return Err(MftpError::config("folds", format!("{} folds; 2..=10 supported", spec.folds)));
    }
    if n < 2 * spec.folds {
        return Err(MftpError::InsufficientData(format!("{n} subjects for {} folds", spec.folds)));
    }
    let parts = fold_assignment(n, spec.folds, spec.seed);
    let mut contrib = vec![0.0; n];
    let mut all_w = Vec::with_capacity(n);
    let mut diag = Diagnostics { tail_residual: prep.tail(spec.k), ..Default::default() };
    for (f, eval) in parts.iter().enumerate() {
        let train: Vec<usize> = parts
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        let fp = nuisance
            .predict_fold(prep, spec, &train, eval)
            .map_err(|e| MftpError::Fold { fold: f, source: Box::new(e) })?;
        for (j, &i) in eval.iter().enumerate() {
            contrib[i] = fp.m_shifted[j] + (prep.y[i] - fp.m_observed[j]) * fp.weights[j];
        }
        diag.cap_hits += fp.cap_hits;
        diag.separation |= fp.separation;
        all_w.extend(fp.weights);
    }
    // overall mean == size-weighted mean of fold means
    let point = mean(&contrib);
    let mut est = MftpEstimate::bare(EstimatorKind::Aipw, point, n, spec);
    est.variance_plugin = Some(variance(&contrib) / n as f64);
    diag.weight_min = all_w.iter().cloned().reduce(f64::min);
    diag.weight_max = all_w.iter().cloned().reduce(f64::max);
    diag.ess = Some(crate::weights::effective_sample_size(&all_w));
    est.diagnostics = diag;
    Ok(est)
}

/// Dispatch on `spec.kind`.
pub fn estimate(prep: &PreparedData, spec: &EstimatorSpec) -> Result<MftpEstimate> {
    match spec.kind {
        EstimatorKind::Or => or_on(prep, spec),
        EstimatorKind::IpwHajek => ipw_on(prep, spec, IpwMode::Hajek),
        EstimatorKind::IpwPlain => ipw_on(prep, spec, IpwMode::Plain),
        EstimatorKind::Aipw => aipw_on(prep, spec),
    }
}

/// `(1/n) Σ m̂(x_i, q(x_i, a_i))` for an already fitted outcome model.
pub fn estimate_or(
    data: &Dataset,
    policy: &dyn TreatmentPolicy,
    outcome_model: &OutcomeModel,
) -> Result<MftpEstimate> {
    if data.n() == 0 {
        return Err(MftpError::InsufficientData("no subjects".into()));
    }
    let modified = shifted_curves(policy, data)?;
    let preds = data
        .samples()
        .iter()
        .zip(&modified)
        .map(|(s, c)| outcome_model.predict(&s.covariates, c))
        .collect::<Result<Vec<f64>>>()?;
    let k_m = outcome_model.k_m();
    let spec = EstimatorSpec::new(EstimatorKind::Or, k_m, k_m);
    let mut est = MftpEstimate::bare(EstimatorKind::Or, mean(&preds), data.n(), &spec);
    est.diagnostics.tail_residual = outcome_model.basis().tail_residual(k_m)?;
    Ok(est)
}

/// Weighted mean of the outcomes using weights fitted on the same data.
pub fn estimate_ipw(data: &Dataset, wm: &WeightModel, mode: IpwMode) -> Result<MftpEstimate> {
    let y = data.outcomes();
    let kind = match mode {
        IpwMode::Hajek => EstimatorKind::IpwHajek,
        IpwMode::Plain => EstimatorKind::IpwPlain,
    };
    let spec = EstimatorSpec::new(kind, wm.k, 0);
    let mut est = MftpEstimate::bare(kind, ipw_point(&y, wm, mode)?, y.len(), &spec);
    est.diagnostics = weight_diagnostics(wm, 0.0);
    Ok(est)
}

/// Cross-fitted AIPW with nuisances refit per fold on the shared basis.
pub fn estimate_aipw(
    data: &Dataset,
    basis: &FpcaModel,
    policy: &dyn TreatmentPolicy,
    spec: &EstimatorSpec,
) -> Result<MftpEstimate> {
    let prep = PreparedData::new(data, basis, policy, spec.columns())?;
    aipw_on(&prep, &EstimatorSpec { kind: EstimatorKind::Aipw, ..*spec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    /// Sorted replicate estimates.
    pub replicates: Vec<f64>,
    pub skipped: usize,
    pub b: usize,
}

impl BootstrapResult {
    /// Percentile interval at another level from the same replicates.
    pub fn interval(&self, alpha: f64) -> (f64, f64) {
        (
            quantile_sorted(&self.replicates, alpha / 2.0),
            quantile_sorted(&self.replicates, 1.0 - alpha / 2.0),
        )
    }
}

pub const MIN_BOOTSTRAP: usize = 100;
/// Fraction of skipped resamples above which a warning is logged.
pub const SKIP_WARN_FRACTION: f64 = 0.05;

fn resample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn finish_bootstrap(results: Vec<Option<f64>>, b: usize, alpha: f64) -> Result<BootstrapResult> {
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let mut reps: Vec<f64> = results.into_iter().flatten().collect();
    if reps.is_empty() {
        return Err(MftpError::UndefinedEstimate("every bootstrap resample failed".into()));
    }
    if skipped as f64 > SKIP_WARN_FRACTION * b as f64 {
        log::warn!("bootstrap: {skipped} of {b} resamples skipped; interval may be unreliable");
    }
    reps.sort_by(f64::total_cmp);
    let mut out = BootstrapResult { lo: 0.0, hi: 0.0, alpha, replicates: reps, skipped, b };
    (out.lo, out.hi) = out.interval(alpha);
    Ok(out)
}

fn check_bootstrap(b: usize, alpha: f64) -> Result<()> {
    if b < MIN_BOOTSTRAP {
        return Err(MftpError::config("bootstrap", format!("B={b}; at least {MIN_BOOTSTRAP} required")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MftpError::config("alpha", format!("alpha={alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Subject-level percentile bootstrap reusing the basis of `prep`; nuisances
/// are refit in every resample.
pub fn bootstrap_ci(
    prep: &PreparedData,
    spec: &EstimatorSpec,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    check_bootstrap(b, alpha)?;
    let n = prep.n();
    let results: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let sub = prep.subset(&resample_indices(n, s));
            let sp = EstimatorSpec { seed: derive_seed(s, 1), ..*spec };
            match estimate(&sub, &sp) {
                Ok(e) if e.point.is_finite() => Some(e.point),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("bootstrap resample {r}: {e}");
                    None
                }
            }
        })
        .collect();
    finish_bootstrap(results, b, alpha)
}

/// Bootstrap that also refits the FPCA basis in every resample, keeping
/// `spec.columns()` components. Resamples whose basis has fewer components
/// (for example all curves identical) are skipped.
pub fn bootstrap_ci_refit(
    data: &Dataset,
    policy: &dyn TreatmentPolicy,
    spec: &EstimatorSpec,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    check_bootstrap(b, alpha)?;
    let n = data.n();
    let results: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let sub = data.select(&resample_indices(n, s));
            let basis = crate::fpca::fit_fpca(&sub, KRule::VarianceFraction(1.0)).ok()?;
            if basis.n_components() < spec.columns() {
                return None;
            }
            let prep = PreparedData::new(&sub, &basis, policy, spec.columns()).ok()?;
            let sp = EstimatorSpec { seed: derive_seed(s, 1), ..*spec };
            estimate(&prep, &sp).ok().map(|e| e.point).filter(|p| p.is_finite())
        })
        .collect();
    finish_bootstrap(results, b, alpha)
}

/// Point estimate plus a bootstrap interval from the same estimator.
pub fn estimate_with_ci(
    prep: &PreparedData,
    spec: &EstimatorSpec,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<MftpEstimate> {
    let mut est = estimate(prep, spec)?;
    if b > 0 {
        let boot = bootstrap_ci(prep, spec, b, alpha, seed)?;
        est.ci = Some((boot.lo, boot.hi));
        est.alpha = Some(alpha);
        est.bootstrap_b = b;
        est.bootstrap_skipped = boot.skipped;
    }
    Ok(est)
}
