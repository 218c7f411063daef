//! Run configuration: a TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{MftpError, Result};
use crate::estimators::EstimatorKind;
use crate::fgrid::TimeGrid;
use crate::policy::{ModificationPolicy, Window};
use crate::simgen::{Kernel, OutcomeModelKind, SimConfig};
use crate::weights::{CapRule, FeatureMap};

pub const DEFAULT_VARIANCE_FRACTION: f64 = 0.95;
pub const DEFAULT_FOLDS: usize = 2;
pub const DEFAULT_BOOTSTRAP: usize = 500;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 20240601;
pub const MIN_REPLICATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Simulate,
    FpcaDiagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Simulate => "simulate",
            Command::FpcaDiagnose => "fpca-diagnose",
        }
    }
}

// ---- file schema ----

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub outcome_kind: Option<String>,
    pub policy: Option<PolicyValue>,
    pub fpca: Option<FpcaSection>,
    pub estimation: Option<EstimationSection>,
    pub sweep: Option<SweepSection>,
    pub simulate: Option<SimulateSection>,
}

/// `policy = "identity"` or a `[policy]` table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PolicyValue {
    Name(String),
    Table(PolicySection),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: String,
    pub tau: Option<f64>,
    pub warp_exponent: Option<f64>,
    /// "23:00-06:00" in clock time or "0.2-0.4" in normalized time.
    pub window: Option<Vec<String>>,
    pub threshold: Option<f64>,
    pub renormalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpcaSection {
    pub variance_fraction: Option<f64>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "K_m")]
    pub k_m: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub folds: Option<usize>,
    pub bootstrap: Option<usize>,
    pub alpha: Option<f64>,
    pub feature_map: Option<FeatureMap>,
    pub cap_quantile: Option<f64>,
    pub cap_hard: Option<f64>,
    /// Refit the FPCA basis inside every bootstrap resample.
    pub refit_basis: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub tau: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Option<String>,
    pub n: Option<Vec<usize>>,
    pub replications: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub p: Option<usize>,
    pub kernel: Option<Kernel>,
    pub outcome: Option<OutcomeModelKind>,
    /// "default", "diurnal", or a path to a one-column CSV with header `mean`.
    pub mean: Option<String>,
    pub oracle_n: Option<usize>,
    pub k_sweep: Option<Vec<usize>>,
    /// Write one simulated dataset in the input CSV layout instead of running
    /// replications.
    pub dataset_out: Option<PathBuf>,
    pub dataset_n: Option<usize>,
    pub dataset_clock: Option<bool>,
}

// ---- resolved configuration ----

/// Window before it is mapped onto a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowSpec {
    Normalized { lo: f64, hi: f64 },
    /// Minutes after midnight; `lo > hi` wraps past midnight.
    Clock { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Identity,
    ScaleWarp { tau: f64, warp_exponent: f64 },
    WindowThreshold { tau: f64, windows: Vec<WindowSpec>, threshold: f64, renormalize: bool },
}

impl PolicySpec {
    pub fn tau(&self) -> Option<f64> {
        match self {
            PolicySpec::Identity => None,
            PolicySpec::ScaleWarp { tau, .. } | PolicySpec::WindowThreshold { tau, .. } => Some(*tau),
        }
    }

    pub fn with_tau(&self, t: f64) -> PolicySpec {
        match self.clone() {
            PolicySpec::Identity => PolicySpec::Identity,
            PolicySpec::ScaleWarp { warp_exponent, .. } => PolicySpec::ScaleWarp { tau: t, warp_exponent },
            PolicySpec::WindowThreshold { windows, threshold, renormalize, .. } => {
                PolicySpec::WindowThreshold { tau: t, windows, threshold, renormalize }
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Identity => "identity",
            PolicySpec::ScaleWarp { .. } => "scale_warp",
            PolicySpec::WindowThreshold { .. } => "window_threshold",
        }
    }

    /// Map windows onto `grid`. With `clock` headers, clock windows go
    /// through the grid's own normalization; otherwise the grid is taken to
    /// span one day.
    pub fn resolve(&self, grid: &TimeGrid, clock: bool) -> Result<ModificationPolicy> {
        match self {
            PolicySpec::Identity => Ok(ModificationPolicy::Identity),
            PolicySpec::ScaleWarp { tau, warp_exponent } => ModificationPolicy::scale_warp(*tau, *warp_exponent),
            PolicySpec::WindowThreshold { tau, windows, threshold, renormalize } => {
                let to_unit = |m: f64| -> f64 {
                    let u = if clock { grid.normalize(m) } else { m / MINUTES_PER_DAY };
                    u.clamp(0.0, 1.0)
                };
                let mut out = Vec::new();
                for w in windows {
                    match *w {
                        WindowSpec::Normalized { lo, hi } => out.push(Window { lo, hi }),
                        WindowSpec::Clock { lo, hi } if lo < hi => {
                            out.push(Window { lo: to_unit(lo), hi: to_unit(hi) })
                        }
                        WindowSpec::Clock { lo, hi } => {
                            out.push(Window { lo: to_unit(lo), hi: 1.0 });
                            out.push(Window { lo: 0.0, hi: to_unit(hi) });
                        }
                    }
                }
                out.retain(|w| w.hi > w.lo);
                ModificationPolicy::window_threshold(*tau, out, *threshold, *renormalize)
            }
        }
    }
}

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// "HH:MM" or "HH:MM:SS(.fff)" to minutes after midnight; "24:00" allowed.
pub fn parse_clock(s: &str) -> Option<f64> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    if parts.len() < 2 || parts.len() > 3 {
        return None;
    }
    let h: u32 = parts[0].parse().ok()?;
    let m: u32 = parts[1].parse().ok()?;
    let sec: f64 = if parts.len() == 3 { parts[2].parse().ok()? } else { 0.0 };
    if m >= 60 || !(0.0..60.0).contains(&sec) {
        return None;
    }
    let total = h as f64 * 60.0 + m as f64 + sec / 60.0;
    (total <= MINUTES_PER_DAY).then_some(total)
}

fn parse_window(s: &str) -> Result<WindowSpec> {
    let bad = || MftpError::config("policy.window", format!("cannot parse window `{s}`; use \"23:00-06:00\" or \"0.2-0.4\""));
    // accept an en dash too
    let norm = s.replace('\u{2013}', "-");
    let (a, b) = norm.split_once('-').ok_or_else(bad)?;
    if a.contains(':') || b.contains(':') {
        let lo = parse_clock(a).ok_or_else(bad)?;
        let hi = parse_clock(b).ok_or_else(bad)?;
        if lo == hi {
            return Err(MftpError::config("policy.window", format!("empty window `{s}`")));
        }
        Ok(WindowSpec::Clock { lo, hi })
    } else {
        let lo: f64 = a.trim().parse().map_err(|_| bad())?;
        let hi: f64 = b.trim().parse().map_err(|_| bad())?;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(MftpError::config("policy.window", format!("need 0 <= lo < hi <= 1 in `{s}`")));
        }
        Ok(WindowSpec::Normalized { lo, hi })
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(MftpError::config(key, format!("{v} must be > 0")))
    }
}

fn policy_from(section: &PolicySection) -> Result<PolicySpec> {
    match section.kind.as_str() {
        "identity" => {
            if section.tau.is_some_and(|t| t != 1.0) {
                return Err(MftpError::config("policy.tau", "identity policy takes no tau"));
            }
            Ok(PolicySpec::Identity)
        }
        "scale_warp" => {
            let tau = positive("policy.tau", section.tau.unwrap_or(1.0))?;
            let warp_exponent = positive("policy.warp_exponent", section.warp_exponent.unwrap_or(1.0))?;
            Ok(PolicySpec::ScaleWarp { tau, warp_exponent })
        }
        "window_threshold" => {
            let tau = positive("policy.tau", section.tau.unwrap_or(1.0))?;
            let raw = section
                .window
                .as_ref()
                .filter(|w| !w.is_empty())
                .ok_or_else(|| MftpError::config("policy.window", "window_threshold needs at least one window"))?;
            let windows = raw.iter().map(|w| parse_window(w)).collect::<Result<Vec<_>>>()?;
            let threshold = section
                .threshold
                .ok_or_else(|| MftpError::config("policy.threshold", "window_threshold needs a threshold"))?;
            if !threshold.is_finite() {
                return Err(MftpError::config("policy.threshold", "threshold must be finite"));
            }
            Ok(PolicySpec::WindowThreshold {
                tau,
                windows,
                threshold,
                renormalize: section.renormalize.unwrap_or(true),
            })
        }
        other => Err(MftpError::config(
            "policy.kind",
            format!("unknown policy `{other}`; expected identity, scale_warp, window_threshold"),
        )),
    }
}

/// Flag values; `None` leaves the file value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub policy: Option<String>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub folds: Option<usize>,
    pub bootstrap: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSettings {
    pub base: SimConfig,
    pub ns: Vec<usize>,
    pub k_sweep: Option<Vec<usize>>,
    pub dataset_out: Option<PathBuf>,
    pub dataset_n: usize,
    pub dataset_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub policy: PolicySpec,
    /// Weighting K; `None` takes the variance rule.
    pub k: Option<usize>,
    pub k_m: Option<usize>,
    pub variance_fraction: f64,
    pub folds: usize,
    pub bootstrap: usize,
    pub alpha: f64,
    pub feature_map: FeatureMap,
    pub cap_rule: CapRule,
    pub refit_basis: bool,
    pub estimators: Vec<EstimatorKind>,
    pub outcome_binary: Option<bool>,
    pub sweep: Option<Vec<f64>>,
    pub simulate: Option<SimulateSettings>,
}

pub fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| MftpError::io(path, e))?;
    parse_file_config(&text)
}

pub fn parse_file_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| text[s].lines().next().unwrap_or("").to_string()).unwrap_or_default();
        MftpError::config(if key.is_empty() { "<root>".to_string() } else { key }, e.message().to_string())
    })
}

/// Merge `file` and `flags` (flags win) and validate.
pub fn resolve(command: Command, file: FileConfig, flags: Overrides) -> Result<RunConfig> {
    let est = file.estimation.unwrap_or_default();
    let fpca = file.fpca.unwrap_or_default();

    let mut policy_section = match file.policy {
        None => None,
        Some(PolicyValue::Name(kind)) => Some(PolicySection { kind, ..Default::default() }),
        Some(PolicyValue::Table(t)) => Some(t),
    };
    if let Some(kind) = flags.policy {
        let mut s = policy_section.unwrap_or_default();
        if s.kind != kind {
            s = PolicySection { kind, window: s.window, threshold: s.threshold, renormalize: s.renormalize, ..Default::default() };
        }
        policy_section = Some(s);
    }
    if let Some(t) = flags.tau {
        let s = policy_section
            .as_mut()
            .ok_or_else(|| MftpError::config("tau", "--tau given without a policy"))?;
        s.tau = Some(t);
    }
    let policy = match &policy_section {
        Some(s) => Some(policy_from(s)?),
        None => None,
    };

    let variance_fraction = fpca.variance_fraction.unwrap_or(DEFAULT_VARIANCE_FRACTION);
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(MftpError::config("fpca.variance_fraction", format!("{variance_fraction} outside (0, 1]")));
    }
    let k = flags.k.or(fpca.k);
    if k == Some(0) {
        return Err(MftpError::config("fpca.K", "K must be positive"));
    }
    if fpca.k_m == Some(0) {
        return Err(MftpError::config("fpca.K_m", "K_m must be positive"));
    }
    let folds = flags.folds.or(est.folds).unwrap_or(DEFAULT_FOLDS);
    if !(2..=10).contains(&folds) {
        return Err(MftpError::config("estimation.folds", format!("{folds} outside 2..=10")));
    }
    let default_b = if command == Command::Simulate { 0 } else { DEFAULT_BOOTSTRAP };
    let bootstrap = flags.bootstrap.or(est.bootstrap).unwrap_or(default_b);
    if bootstrap != 0 && bootstrap < crate::estimators::MIN_BOOTSTRAP {
        return Err(MftpError::config(
            "estimation.bootstrap",
            format!("B={bootstrap}; use 0 to skip or at least {}", crate::estimators::MIN_BOOTSTRAP),
        ));
    }
    let alpha = flags.alpha.or(est.alpha).unwrap_or(DEFAULT_ALPHA);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MftpError::config("estimation.alpha", format!("{alpha} outside (0, 1)")));
    }
    let quantile = match est.cap_quantile {
        Some(q) if q >= 1.0 => None,
        Some(q) if q > 0.5 => Some(q),
        Some(q) => return Err(MftpError::config("estimation.cap_quantile", format!("{q} outside (0.5, 1]"))),
        None => CapRule::default().quantile,
    };
    let hard_max = est.cap_hard.unwrap_or(CapRule::default().hard_max);
    if !(hard_max >= 1.0) {
        return Err(MftpError::config("estimation.cap_hard", format!("{hard_max} below 1")));
    }
    let estimators = match &file.estimators {
        None => EstimatorKind::ALL.to_vec(),
        Some(list) => {
            if list.is_empty() {
                return Err(MftpError::config("estimators", "empty list"));
            }
            list.iter()
                .map(|s| {
                    EstimatorKind::parse(s)
                        .ok_or_else(|| MftpError::config("estimators", format!("unknown estimator `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let outcome_binary = match file.outcome_kind.as_deref() {
        None | Some("auto") => None,
        Some("binary") => Some(true),
        Some("continuous") => Some(false),
        Some(o) => return Err(MftpError::config("outcome_kind", format!("`{o}`; expected auto, binary, continuous"))),
    };
    let threads = flags.threads.or(file.threads);
    if threads == Some(0) {
        return Err(MftpError::config("threads", "threads must be positive"));
    }
    let explicit_seed = flags.seed.or(file.seed);
    let seed = explicit_seed.unwrap_or(DEFAULT_SEED);
    let input = flags.input.or(file.input);
    let out = flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("mftp-out"));

    let sweep = match file.sweep {
        None => None,
        Some(s) => {
            if s.tau.is_empty() {
                return Err(MftpError::config("sweep.tau", "empty list"));
            }
            for &t in &s.tau {
                positive("sweep.tau", t)?;
            }
            Some(s.tau)
        }
    };

    let cap_rule = CapRule { quantile, hard_max };
    let feature_map = est.feature_map.unwrap_or_default();

    let mut cfg = RunConfig {
        command,
        input,
        out,
        seed,
        threads,
        policy: policy.clone().unwrap_or(PolicySpec::Identity),
        k,
        k_m: fpca.k_m,
        variance_fraction,
        folds,
        bootstrap,
        alpha,
        feature_map,
        cap_rule,
        refit_basis: est.refit_basis.unwrap_or(false),
        estimators,
        outcome_binary,
        sweep,
        simulate: None,
    };

    match command {
        Command::Analyze => {
            if policy.is_none() {
                return Err(MftpError::config("policy", "analyze needs a policy"));
            }
            if cfg.sweep.is_some() && cfg.policy == PolicySpec::Identity {
                return Err(MftpError::config("sweep", "a tau sweep needs a non-identity policy"));
            }
            require_input(&cfg)?;
        }
        Command::FpcaDiagnose => require_input(&cfg)?,
        Command::Simulate => {
            let s = file.simulate.unwrap_or_default();
            let settings = simulate_settings(s, &cfg, policy.as_ref(), explicit_seed, file.estimators.is_some())?;
            cfg.seed = settings.base.seed;
            cfg.simulate = Some(settings);
        }
    }
    Ok(cfg)
}

fn require_input(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| MftpError::config("input", format!("{} needs an input CSV", cfg.command.name())))?;
    if !path.is_file() {
        return Err(MftpError::config("input", format!("{} does not exist", path.display())));
    }
    Ok(())
}

/// Scenario ids map to (outcome, τ) pairs; explicit keys override them.
fn simulate_settings(
    s: SimulateSection,
    cfg: &RunConfig,
    policy: Option<&PolicySpec>,
    seed: Option<u64>,
    explicit_estimators: bool,
) -> Result<SimulateSettings> {
    let mut base = match s.scenario.as_deref() {
        None => SimConfig { label: "custom".into(), ..Default::default() },
        Some(id) => {
            let id: u8 = id
                .trim()
                .trim_start_matches("scenario")
                .parse()
                .map_err(|_| MftpError::config("simulate.scenario", format!("`{id}`; expected 1-4")))?;
            SimConfig::scenario(id)?
        }
    };
    if let Some(seed) = seed {
        base.seed = seed;
    }
    if let Some(o) = s.outcome {
        base.outcome = o;
    }
    if let Some(p) = policy {
        let t = s.t.unwrap_or(base.t);
        // a clock dataset is written on the grid of `clock_grid`; resolve
        // windows the same way the reader will
        if s.dataset_clock.unwrap_or(false) {
            base.policy = p.resolve(&clock_grid(t)?, true)?;
        } else {
            base.policy = p.resolve(&TimeGrid::uniform(t)?, false)?;
        }
    }
    if let Some(t) = s.t {
        base.t = t;
    }
    if let Some(p) = s.p {
        base.p = p;
    }
    if let Some(k) = s.kernel {
        base.kernel = k;
    }
    if let Some(m) = &s.mean {
        base.mean_fn = mean_curve(m, base.t)?;
    }
    if let Some(o) = s.oracle_n {
        if o < 10_000 {
            return Err(MftpError::config("simulate.oracle_n", format!("{o} below 10000")));
        }
        base.oracle_n = o;
    }
    base.k = cfg.k.unwrap_or(base.k);
    base.k_m = cfg.k_m;
    base.variance_fraction = cfg.variance_fraction;
    base.folds = cfg.folds;
    base.feature_map = cfg.feature_map;
    base.cap_rule = cfg.cap_rule;
    base.bootstrap = cfg.bootstrap;
    base.alpha = cfg.alpha;
    if explicit_estimators {
        base.estimators = cfg.estimators.clone();
    }
    base.interval_estimators = if base.estimators.contains(&EstimatorKind::Aipw) {
        vec![EstimatorKind::Aipw]
    } else {
        Vec::new()
    };
    base.replications = s.replications.unwrap_or(base.replications);
    if base.replications < MIN_REPLICATIONS {
        return Err(MftpError::config(
            "simulate.replications",
            format!("{} replications; at least {MIN_REPLICATIONS} required", base.replications),
        ));
    }
    let ns = s.n.unwrap_or_else(|| vec![100, 200, 400, 800, 1600]);
    if ns.is_empty() {
        return Err(MftpError::config("simulate.n", "empty list"));
    }
    for &n in &ns {
        if n < 20 {
            return Err(MftpError::config("simulate.n", format!("n={n} below 20")));
        }
    }
    base.n = ns[0];
    if let Some(ks) = &s.k_sweep {
        if ks.is_empty() || ks.contains(&0) {
            return Err(MftpError::config("simulate.k_sweep", "need positive K values"));
        }
    }
    base.validate()?;
    let dataset_n = s.dataset_n.unwrap_or(500);
    if dataset_n < 20 {
        return Err(MftpError::config("simulate.dataset_n", format!("{dataset_n} below 20")));
    }
    Ok(SimulateSettings {
        base,
        ns,
        k_sweep: s.k_sweep,
        dataset_out: s.dataset_out,
        dataset_n,
        dataset_clock: s.dataset_clock.unwrap_or(false),
    })
}

/// `t` points starting at midnight, spaced 1440/t minutes apart.
pub fn clock_grid(t: usize) -> Result<TimeGrid> {
    TimeGrid::new((0..t).map(|j| j as f64 * MINUTES_PER_DAY / t as f64).collect())
}

/// Diurnal activity-like mean: flat at night, one daytime hump.
pub fn diurnal_mean(u: f64) -> f64 {
    let h = 24.0 * u;
    if h < 6.0 {
        0.5
    } else {
        0.5 + 3.5 * (std::f64::consts::PI * (h - 6.0) / 18.0).sin().powi(2)
    }
}

fn mean_curve(spec: &str, t: usize) -> Result<Option<Vec<f64>>> {
    let grid = TimeGrid::uniform(t)?;
    match spec {
        "default" => Ok(None),
        "diurnal" => Ok(Some(grid.points().iter().map(|&u| diurnal_mean(u)).collect())),
        path => {
            let mut r = csv::Reader::from_path(path)?;
            let headers = r.headers()?.clone();
            if headers.len() != 1 || &headers[0] != "mean" {
                return Err(MftpError::config("simulate.mean", format!("{path}: expected a single `mean` column")));
            }
            let mut v = Vec::with_capacity(t);
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let x: f64 = rec[0].trim().parse().map_err(|_| {
                    MftpError::config("simulate.mean", format!("{path} line {}: not a number", i + 2))
                })?;
                v.push(x);
            }
            if v.len() != t {
                return Err(MftpError::config("simulate.mean", format!("{path}: {} values for T={t}", v.len())));
            }
            Ok(Some(v))
        }
    }
}
