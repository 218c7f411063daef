use std::path::Path;

use rayon::prelude::*;

use super::{default_mean, Kernel, OracleValue, OutcomeModelKind, OutcomeSpec, Population};
use crate::error::{MftpError, Result};
use crate::estimators::{bootstrap_ci, estimate, EstimatorKind, EstimatorSpec, PreparedData};
use crate::fgrid::TimeGrid;
use crate::fpca::{fit_fpca, least_squares, KRule};
use crate::policy::ModificationPolicy;
use crate::util::derive_seed;
use crate::weights::{CapRule, FeatureMap};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.02;

const STREAM_BETA: u64 = 0xBE7A;
const STREAM_ORACLE: u64 = 0x0AC1E;
const STREAM_DATA: u64 = 0xDA7A;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub label: String,
    pub n: usize,
    pub t: usize,
    pub p: usize,
    pub kernel: Kernel,
    /// Mean curve on the grid; `None` uses the default a_0.
    pub mean_fn: Option<Vec<f64>>,
    pub outcome: OutcomeModelKind,
    pub policy: ModificationPolicy,
    /// Components balanced by the weight model.
    pub k: usize,
    /// Components in the outcome model; `None` takes the variance rule.
    pub k_m: Option<usize>,
    pub variance_fraction: f64,
    pub folds: usize,
    pub feature_map: FeatureMap,
    pub cap_rule: CapRule,
    pub replications: usize,
    /// Bootstrap resamples per replication; 0 skips intervals.
    pub bootstrap: usize,
    pub alpha: f64,
    pub oracle_n: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Estimators that get bootstrap intervals.
    pub interval_estimators: Vec<EstimatorKind>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            label: "custom".into(),
            n: 400,
            t: 100,
            p: 15,
            kernel: Kernel::SquaredExponential { sigma: 0.05 },
            mean_fn: None,
            outcome: OutcomeModelKind::Simple,
            policy: ModificationPolicy::ScaleWarp { tau: 1.0, warp_exponent: 1.2 },
            k: 4,
            k_m: None,
            variance_fraction: 0.95,
            folds: 2,
            feature_map: FeatureMap::Linear,
            cap_rule: CapRule::default(),
            replications: 200,
            bootstrap: 0,
            alpha: 0.05,
            oracle_n: 2_000_000,
            seed: 20240601,
            estimators: vec![EstimatorKind::Or, EstimatorKind::IpwHajek, EstimatorKind::Aipw],
            interval_estimators: vec![EstimatorKind::Aipw],
        }
    }
}

impl SimConfig {
    /// Scenarios 1-4: simple or complex outcome crossed with τ ∈ {1, 0.8}.
    pub fn scenario(id: u8) -> Result<Self> {
        let (outcome, tau) = match id {
            1 => (OutcomeModelKind::Simple, 1.0),
            2 => (OutcomeModelKind::Simple, 0.8),
            3 => (OutcomeModelKind::Complex, 1.0),
            4 => (OutcomeModelKind::Complex, 0.8),
            _ => return Err(MftpError::config("scenario", format!("unknown scenario {id}; expected 1-4"))),
        };
        Ok(SimConfig {
            label: format!("scenario{id}"),
            outcome,
            policy: ModificationPolicy::scale_warp(tau, 1.2)?,
            seed: 20240600 + id as u64,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(MftpError::config("n", format!("n={} below 20", self.n)));
        }
        if self.t < 10 {
            return Err(MftpError::config("T", format!("T={} below 10", self.t)));
        }
        self.kernel.validate()?;
        self.policy.validate()?;
        if self.replications == 0 {
            return Err(MftpError::config("replications", "at least one replication required"));
        }
        if self.k == 0 {
            return Err(MftpError::config("K", "K must be positive"));
        }
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return Err(MftpError::config("variance_fraction", "must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MftpError::config("alpha", "must lie in (0, 1)"));
        }
        if self.estimators.is_empty() {
            return Err(MftpError::config("estimators", "no estimators selected"));
        }
        Ok(())
    }

    pub fn population(&self) -> Result<Population> {
        let grid = TimeGrid::uniform(self.t)?;
        let mean = match &self.mean_fn {
            Some(m) => m.clone(),
            None => grid.points().iter().map(|t| default_mean(*t)).collect(),
        };
        let outcome = OutcomeSpec::draw(self.outcome, self.p, derive_seed(self.seed, STREAM_BETA));
        Population::new(grid, mean, self.kernel, self.p, outcome)
    }

    pub fn oracle(&self, pop: &Population) -> Result<OracleValue> {
        pop.oracle_truth(&self.policy, self.oracle_n, derive_seed(self.seed, STREAM_ORACLE))
    }

    fn replication_seed(&self, n: usize, r: usize) -> u64 {
        derive_seed(derive_seed(self.seed, STREAM_DATA), ((n as u64) << 32) | r as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub k: usize,
    pub mse: f64,
    pub bias: f64,
    /// Standard error of the mean error across replications.
    pub bias_se: f64,
    pub sd: f64,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub label: String,
    pub n: usize,
    pub k: usize,
    pub truth: OracleValue,
    pub estimators: Vec<EstimatorKind>,
    /// `estimates[e][r]` for estimator `e` and successful replication `r`.
    pub estimates: Vec<Vec<f64>>,
    /// Intervals aligned with `estimates`, when requested.
    pub intervals: Vec<Option<Vec<(f64, f64)>>>,
    pub failures: usize,
    pub replications: usize,
    pub summaries: Vec<CellSummary>,
}

impl ScenarioResult {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.estimator == kind)
    }

    pub fn errors(&self, kind: EstimatorKind) -> Option<Vec<f64>> {
        let e = self.estimators.iter().position(|k| *k == kind)?;
        Some(self.estimates[e].iter().map(|v| v - self.truth.value).collect())
    }
}

type RepOutput = Vec<Vec<(f64, Option<(f64, f64)>)>>;

/// One replication: estimates indexed `[k][estimator]`.
fn replicate(pop: &Population, cfg: &SimConfig, n: usize, ks: &[usize], seed: u64) -> Result<RepOutput> {
    let data = pop.dataset(n, seed)?;
    let basis = fit_fpca(&data, KRule::VarianceFraction(cfg.variance_fraction))?;
    let k_m = cfg.k_m.unwrap_or(basis.k()).max(1);
    let kmax = ks.iter().copied().max().unwrap_or(cfg.k);
    let cols = kmax.max(k_m);
    let prep = PreparedData::new(&data, &basis, &cfg.policy, cols)?;
    ks.iter()
        .map(|&k| {
            let base = EstimatorSpec {
                folds: cfg.folds,
                feature_map: cfg.feature_map,
                cap_rule: cfg.cap_rule, seed: derive_seed(seed, 7), ..EstimatorSpec::new(EstimatorKind::Aipw, k, k_m) };
            cfg.estimators
                .iter()
                .map(|&kind| {
                    let spec = base.with_kind(kind);
                    let point = estimate(&prep, &spec)?.point;
                    let ci = if cfg.bootstrap > 0 && cfg.interval_estimators.contains(&kind) {
                        let b = bootstrap_ci(&prep, &spec, cfg.bootstrap, cfg.alpha, derive_seed(seed, 8))?;
                        Some((b.lo, b.hi))
                    } else {
                        None
                    };
                    Ok((point, ci))
                })
                .collect()
        })
        .collect()
}

fn summarize(
    label: &str,
    cfg: &SimConfig,
    n: usize,
    k: usize,
    truth: OracleValue,
    reps: &[RepOutput],
    slot: usize,
    failures: usize,
) -> ScenarioResult {
    let mut estimates = Vec::new();
    let mut intervals = Vec::new();
    let mut summaries = Vec::new();
    for (e, &kind) in cfg.estimators.iter().enumerate() {
        let pts: Vec<f64> = reps.iter().map(|r| r[slot][e].0).collect();
        let cis: Option<Vec<(f64, f64)>> = reps.iter().map(|r| r[slot][e].1).collect();
        let r = pts.len() as f64;
        let errs: Vec<f64> = pts.iter().map(|v| v - truth.value).collect();
        let bias = errs.iter().sum::<f64>() / r;
        let mse = errs.iter().map(|v| v * v).sum::<f64>() / r;
        let sd = (errs.iter().map(|v| (v - bias).powi(2)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt();
        let coverage = cis.as_ref().map(|c| {
            c.iter().filter(|(lo, hi)| *lo <= truth.value && truth.value <= *hi).count() as f64 / r
        });
        if truth.se > 0.1 * sd {
            log::warn!("{label} n={n} {}: oracle SE {} is not below 10% of the estimator SE {sd}", kind.label(), truth.se);
        }
        summaries.push(CellSummary {
            estimator: kind,
            n,
            k,
            mse,
            bias,
            bias_se: sd / r.sqrt(),
            sd,
            coverage,
            coverage_se: coverage.map(|c| (c * (1.0 - c) / r).sqrt()),
        });
        estimates.push(pts);
        intervals.push(cis);
    }
    ScenarioResult {
        label: label.to_string(),
        n,
        k,
        truth,
        estimators: cfg.estimators.clone(),
        estimates,
        intervals,
        failures,
        replications: cfg.replications,
        summaries,
    }
}

fn run_reps(pop: &Population, cfg: &SimConfig, n: usize, ks: &[usize]) -> Result<(Vec<RepOutput>, usize)> {
    let outs: Vec<Result<RepOutput>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(pop, cfg, n, ks, cfg.replication_seed(n, r)))
        .collect();
    let mut ok = Vec::with_capacity(outs.len());
    let mut failures = 0;
    for (r, o) in outs.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("{} n={n} replication {r} failed: {e}", cfg.label);
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * cfg.replications as f64 || ok.is_empty() {
        return Err(MftpError::Simulation(format!(
            "{}: {failures} of {} replications failed at n={n}",
            cfg.label, cfg.replications
        )));
    }
    Ok((ok, failures))
}

/// Replications at `cfg.n` against a supplied or freshly computed truth.
pub fn run_scenario(cfg: &SimConfig, truth: Option<OracleValue>) -> Result<ScenarioResult> {
    cfg.validate()?;
    let pop = cfg.population()?;
    let truth = match truth {
        Some(t) => t,
        None => cfg.oracle(&pop)?,
    };
    let (reps, failures) = run_reps(&pop, cfg, cfg.n, &[cfg.k])?;
    Ok(summarize(&cfg.label, cfg, cfg.n, cfg.k, truth, &reps, 0, failures))
}

/// [`run_scenario`] over several sample sizes sharing one truth.
pub fn run_scenario_grid(cfg: &SimConfig, ns: &[usize], truth: Option<OracleValue>) -> Result<Vec<ScenarioResult>> {
    cfg.validate()?;
    let pop = cfg.population()?;
    let truth = match truth {
        Some(t) => t,
        None => cfg.oracle(&pop)?,
    };
    ns.iter()
        .map(|&n| {
            let c = SimConfig { n, ..cfg.clone() };
            c.validate()?;
            let (reps, failures) = run_reps(&pop, &c, n, &[c.k])?;
            Ok(summarize(&c.label, &c, n, c.k, truth, &reps, 0, failures))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub ks: Vec<usize>,
    pub results: Vec<ScenarioResult>,
}

impl SweepResult {
    /// (K, MSE) pairs for one estimator.
    pub fn mse_by_k(&self, kind: EstimatorKind) -> Vec<(usize, f64)> {
        self.results.iter().filter_map(|r| r.summary(kind).map(|s| (r.k, s.mse))).collect()
    }
}

/// The same replicated datasets evaluated at every K in `ks`.
pub fn k_sweep(cfg: &SimConfig, ks: &[usize], truth: Option<OracleValue>) -> Result<SweepResult> {
    cfg.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(MftpError::config("K", "sweep needs positive K values"));
    }
    let pop = cfg.population()?;
    let truth = match truth {
        Some(t) => t,
        None => cfg.oracle(&pop)?,
    };
    let (reps, failures) = run_reps(&pop, cfg, cfg.n, ks)?;
    let results = ks
        .iter()
        .enumerate()
        .map(|(slot, &k)| summarize(&cfg.label, cfg, cfg.n, k, truth, &reps, slot, failures))
        .collect();
    Ok(SweepResult { ks: ks.to_vec(), results })
}

/// Least-squares slope of log MSE against log n.
pub fn mse_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(MftpError::InsufficientData(format!("{} sample sizes; need at least 4", points.len())));
    }
    if let Some((n, m)) = points.iter().find(|(_, m)| !(*m > 0.0)) {
        return Err(MftpError::Numeric(format!("nonpositive MSE {m} at n={n}")));
    }
    let x: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|(_, m)| m.ln()).collect();
    Ok(least_squares(&x, &y).slope)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

/// Plot-data CSVs: `mse.csv` (log n vs log MSE), `coverage.csv`, and
/// `ksweep.csv` when a sweep is supplied.
pub fn write_figure_csvs(dir: &Path, grid: &[ScenarioResult], sweep: Option<&SweepResult>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MftpError::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("mse.csv"))?;
    w.write_record(["schema_version", "scenario", "estimator", "n", "K", "log_n", "mse", "log_mse", "bias", "bias_se", "truth", "truth_se", "failures"])?;
    for r in grid {
        for s in &r.summaries {
            w.write_record([
                "1".to_string(),
                r.label.clone(),
                s.estimator.label().to_string(),
                s.n.to_string(),
                s.k.to_string(),
                fmt((s.n as f64).ln()),
                fmt(s.mse),
                fmt(s.mse.ln()),
                fmt(s.bias),
                fmt(s.bias_se),
                fmt(r.truth.value),
                fmt(r.truth.se),
                r.failures.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| MftpError::io(dir.join("mse.csv"), e))?;
    let mut w = csv::Writer::from_path(dir.join("coverage.csv"))?;
    w.write_record(["schema_version", "scenario", "estimator", "n", "K", "coverage", "coverage_se"])?;
    for r in grid {
        for s in &r.summaries {
            if let (Some(c), Some(se)) = (s.coverage, s.coverage_se) {
                w.write_record([
                    "1".to_string(),
                    r.label.clone(),
                    s.estimator.label().to_string(),
                    s.n.to_string(),
                    s.k.to_string(),
                    fmt(c),
                    fmt(se),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| MftpError::io(dir.join("coverage.csv"), e))?;
    if let Some(sw) = sweep {
        let mut w = csv::Writer::from_path(dir.join("ksweep.csv"))?;
        w.write_record(["schema_version", "scenario", "estimator", "n", "K", "mse", "log_mse", "bias"])?;
        for r in &sw.results {
            for s in &r.summaries {
                w.write_record([
                    "1".to_string(),
                    r.label.clone(),
                    s.estimator.label().to_string(),
                    s.n.to_string(),
                    s.k.to_string(),
                    fmt(s.mse),
                    fmt(s.mse.ln()),
                    fmt(s.bias),
                ])?;
            }
        }
        w.flush().map_err(|e| MftpError::io(dir.join("ksweep.csv"), e))?;
    }
    Ok(())
}
