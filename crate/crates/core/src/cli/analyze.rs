//! `mftp analyze`: estimates, weights, balance, FPCA bundle, optional τ-sweep.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::io::{read_dataset, TimeUnit};
use super::report::{num, opt, write_text, Table};
use crate::error::{MftpError, Result};
use crate::estimators::{
    bootstrap_ci_refit, estimate, estimate_with_ci, fit_outcome_predictor, fit_weights, EstimatorKind,
    EstimatorSpec, MftpEstimate, PreparedData,
};
use crate::fgrid::Dataset;
use crate::fpca::{fit_fpca, FpcaModel, KRule};
use crate::policy::ModificationPolicy;
use crate::util::derive_seed;
use crate::weights::{balance_diagnostics, AugmentedDataset};

const STREAM_FOLDS: u64 = 1;
const STREAM_BOOT: u64 = 2;

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub n: usize,
    pub k: usize,
    pub k_m: usize,
    pub mean_outcome: f64,
    pub policy: ModificationPolicy,
    pub estimates: Vec<MftpEstimate>,
    /// (τ, estimate) for each sweep point and estimator.
    pub sweep: Vec<(f64, MftpEstimate)>,
    pub ess: f64,
}

fn estimate_all(
    cfg: &RunConfig,
    data: &Dataset,
    basis: &FpcaModel,
    policy: &ModificationPolicy,
    base: &EstimatorSpec,
) -> Result<Vec<MftpEstimate>> {
    let prep = PreparedData::new(data, basis, policy, base.columns())?;
    let boot_seed = derive_seed(cfg.seed, STREAM_BOOT);
    cfg.estimators
        .iter()
        .map(|&kind| {
            let spec = base.with_kind(kind);
            if cfg.bootstrap == 0 {
                return estimate(&prep, &spec);
            }
            if !cfg.refit_basis {
                return estimate_with_ci(&prep, &spec, cfg.bootstrap, cfg.alpha, boot_seed);
            }
            let mut est = estimate(&prep, &spec)?;
            let b = bootstrap_ci_refit(data, policy, &spec, cfg.bootstrap, cfg.alpha, boot_seed)?;
            est.ci = Some((b.lo, b.hi));
            est.alpha = Some(cfg.alpha);
            est.bootstrap_b = cfg.bootstrap;
            est.bootstrap_skipped = b.skipped;
            Ok(est)
        })
        .collect()
}

const ESTIMATE_COLUMNS: [&str; 20] = [
    "policy",
    "tau",
    "estimator",
    "point",
    "ci_lo",
    "ci_hi",
    "alpha",
    "n",
    "K",
    "K_m",
    "folds",
    "bootstrap_B",
    "bootstrap_skipped",
    "variance_plugin",
    "weight_min",
    "weight_max",
    "ess",
    "cap_hits",
    "separation",
    "tail_residual",
];

fn estimate_row(policy: &str, tau: Option<f64>, e: &MftpEstimate) -> Vec<String> {
    let d = &e.diagnostics;
    vec![
        policy.to_string(),
        opt(tau),
        e.estimator.label().to_string(),
        num(e.point),
        opt(e.ci.map(|c| c.0)),
        opt(e.ci.map(|c| c.1)),
        opt(e.alpha),
        e.n.to_string(),
        e.k.to_string(),
        e.k_m.to_string(),
        e.folds.to_string(),
        e.bootstrap_b.to_string(),
        e.bootstrap_skipped.to_string(),
        opt(e.variance_plugin),
        opt(d.weight_min),
        opt(d.weight_max),
        opt(d.ess),
        d.cap_hits.to_string(),
        d.separation.to_string(),
        num(d.tail_residual),
    ]
}

pub fn run_analyze(cfg: &RunConfig) -> Result<AnalyzeReport> {
    let input = cfg.input.as_ref().ok_or_else(|| MftpError::config("input", "missing"))?;
    let loaded = read_dataset(input, cfg.outcome_binary)?;
    let data = &loaded.data;
    let basis = fit_fpca(data, KRule::VarianceFraction(cfg.variance_fraction))?;
    let k = cfg.k.unwrap_or(basis.k());
    let k_m = cfg.k_m.unwrap_or(basis.k());
    let policy = cfg.policy.resolve(data.grid(), loaded.unit == TimeUnit::Clock)?;
    let base = EstimatorSpec {
        folds: cfg.folds,
        feature_map: cfg.feature_map,
        cap_rule: cfg.cap_rule,
        seed: derive_seed(cfg.seed, STREAM_FOLDS),
        ..EstimatorSpec::new(EstimatorKind::Aipw, k, k_m)
    };
    log::info!("analyze: n={} T={} K={k} K_m={k_m} policy={}", data.n(), data.grid().len(), cfg.policy.kind());

    let estimates = estimate_all(cfg, data, &basis, &policy, &base)?;
    let out = &cfg.out;
    let tau = cfg.policy.tau();
    let mut t = Table::create(&out.join("estimates.csv"), &ESTIMATE_COLUMNS)?;
    for e in &estimates {
        t.row(estimate_row(cfg.policy.kind(), tau, e))?;
    }
    t.finish()?;

    // full-sample nuisances for the weight and balance reports
    let prep = PreparedData::new(data, &basis, &policy, base.columns())?;
    let wm = fit_weights(&prep, &base)?;
    let mut t = Table::create(&out.join("weights.csv"), &["id", "weight", "odds", "capped"])?;
    for (i, s) in data.samples().iter().enumerate() {
        let w = wm.fitted_weights[i];
        let raw = wm.uncapped_weights[i];
        let capped = raw * wm.raw_scale > w * (1.0 + 1e-12);
        t.row(vec![s.id.clone(), num(w), num(raw), capped.to_string()])?;
    }
    t.finish()?;
    let aug = AugmentedDataset::from_blocks(
        &prep.x,
        &prep.observed.columns(0, k).into_owned(),
        &prep.shifted.columns(0, k).into_owned(),
    )?;
    let bal = balance_diagnostics(&wm, &aug);
    let mut t = Table::create(&out.join("balance.csv"), &["feature", "smd_before", "smd_after", "log_odds_coef"])?;
    for (j, f) in bal.features.iter().enumerate() {
        t.row(vec![f.clone(), num(bal.smd_before[j]), num(bal.smd_after[j]), opt(wm.coef.get(j).copied())])?;
    }
    t.finish()?;
    let pred = fit_outcome_predictor(&prep, &base)?;
    let mut t = Table::create(&out.join("outcome_model.csv"), &["term", "coefficient"])?;
    t.row(vec!["intercept".into(), num(pred.intercept)])?;
    for (j, c) in pred.score_coef.iter().enumerate() {
        t.row(vec![format!("score_{}", j + 1), num(*c)])?;
    }
    for (j, c) in pred.covariate_coef.iter().enumerate() {
        t.row(vec![format!("X_{}", j + 1), num(*c)])?;
    }
    t.row(vec!["lambda".into(), num(pred.lambda)])?;
    t.finish()?;
    basis.write_bundle(&out.join("fpca"))?;

    let mut sweep = Vec::new();
    if let Some(taus) = &cfg.sweep {
        let mut t = Table::create(&out.join("sweep.csv"), &["policy", "tau", "estimator", "point", "ci_lo", "ci_hi"])?;
        for &tv in taus {
            let spec_t = cfg.policy.with_tau(tv);
            let pol = spec_t.resolve(data.grid(), loaded.unit == TimeUnit::Clock)?;
            for e in estimate_all(cfg, data, &basis, &pol, &base)? {
                t.row(vec![
                    cfg.policy.kind().to_string(),
                    num(tv),
                    e.estimator.label().to_string(),
                    num(e.point),
                    opt(e.ci.map(|c| c.0)),
                    opt(e.ci.map(|c| c.1)),
                ])?;
                sweep.push((tv, e));
            }
        }
        t.finish()?;
    }

    let report = AnalyzeReport {
        n: data.n(),
        k,
        k_m,
        mean_outcome: data.mean_outcome(),
        policy,
        estimates,
        sweep,
        ess: bal.ess,
    };
    write_text(&out.join("summary.txt"), &summary(cfg, &report, &basis))?;
    Ok(report)
}

fn summary(cfg: &RunConfig, r: &AnalyzeReport, basis: &FpcaModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mftp analyze");
    let _ = writeln!(s, "input: {}", cfg.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
    let _ = writeln!(s, "subjects: {}  grid points: {}", r.n, basis.grid().len());
    let _ = writeln!(s, "policy: {:?}", r.policy);
    let _ = writeln!(
        s,
        "components: K={} (weights), K_m={} (outcome), {} retained; variance rule {}",
        r.k,
        r.k_m,
        basis.n_components(),
        cfg.variance_fraction
    );
    let _ = writeln!(s, "tail residual at K: {:.6e}", basis.tail_residual(r.k).unwrap_or(f64::NAN));
    let _ = writeln!(s, "observed mean outcome: {:.6}", r.mean_outcome);
    let _ = writeln!(s, "effective sample size of full-sample weights: {:.1} of {}", r.ess, r.n);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>14} {:>30}", "estimator", "estimate", "interval");
    for e in &r.estimates {
        let ci = match e.ci {
            Some((lo, hi)) => format!("[{lo:.6}, {hi:.6}]"),
            None => "-".into(),
        };
        let _ = writeln!(s, "{:<10} {:>14.6} {:>30}", e.estimator.label(), e.point, ci);
    }
    if let Some(a) = r.estimates.iter().find_map(|e| e.alpha) {
        let _ = writeln!(s, "intervals: {:.0}% percentile bootstrap, B={}", 100.0 * (1.0 - a), cfg.bootstrap);
    }
    if r.estimates.iter().any(|e| e.diagnostics.separation) {
        let _ = writeln!(s, "warning: the weight classifier separated the classes; positivity is doubtful");
    }
    s
}
