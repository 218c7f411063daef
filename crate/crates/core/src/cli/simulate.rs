//! `mftp simulate`: scenario replications, figure data, or one synthetic file.

use std::fmt::Write as _;

use super::config::{RunConfig, SimulateSettings};
use super::io::write_dataset;
use super::report::{num, write_text, Table};
use crate::error::{MftpError, Result};
use crate::simgen::{k_sweep, mse_slope, run_scenario_grid, write_figure_csvs, OracleValue, ScenarioResult, SimConfig};
use crate::util::derive_seed;

const STREAM_DATASET: u64 = 0xCA5E;
const STREAM_BASELINE: u64 = 0xBA5E;

pub fn run_simulate(cfg: &RunConfig) -> Result<()> {
    let s = cfg.simulate.as_ref().ok_or_else(|| MftpError::config("simulate", "missing settings"))?;
    let pop = s.base.population()?;
    let truth = s.base.oracle(&pop)?;
    if let Some(path) = &s.dataset_out {
        let data = pop.dataset(s.dataset_n, derive_seed(s.base.seed, STREAM_DATASET))?;
        write_dataset(path, &data, s.dataset_clock)?;
        let baseline = pop.oracle_truth(
            &crate::policy::ModificationPolicy::Identity,
            s.base.oracle_n,
            derive_seed(s.base.seed, STREAM_BASELINE),
        )?;
        write_truth(cfg, &s.base, truth, Some(baseline))?;
        log::info!("wrote {} subjects to {}", data.n(), path.display());
        return Ok(());
    }
    log::info!("simulate {}: truth {:.6} (se {:.2e})", s.base.label, truth.value, truth.se);
    let grid = run_scenario_grid(&s.base, &s.ns, Some(truth))?;
    let sweep = match &s.k_sweep {
        Some(ks) => {
            let n = *s.ns.iter().max().expect("validated non-empty");
            Some(k_sweep(&SimConfig { n, ..s.base.clone() }, ks, Some(truth))?)
        }
        None => None,
    };
    write_figure_csvs(&cfg.out, &grid, sweep.as_ref())?;
    write_replications(cfg, &grid)?;
    write_truth(cfg, &s.base, truth, None)?;
    write_text(&cfg.out.join("summary.txt"), &summary(s, &grid, truth))
}

/// Oracle values; `baseline` is the identity-policy mean when written.
fn write_truth(cfg: &RunConfig, base: &SimConfig, truth: OracleValue, baseline: Option<OracleValue>) -> Result<()> {
    let mut t = Table::create(&cfg.out.join("truth.csv"), &["scenario", "policy", "value", "se", "draws", "seed"])?;
    let mut rows = vec![(format!("{:?}", base.policy), truth)];
    rows.extend(baseline.map(|b| ("Identity".to_string(), b)));
    for (name, v) in rows {
        t.row(vec![base.label.clone(), name, num(v.value), num(v.se), v.draws.to_string(), base.seed.to_string()])?;
    }
    t.finish()
}

fn write_replications(cfg: &RunConfig, grid: &[ScenarioResult]) -> Result<()> {
    let mut t = Table::create(
        &cfg.out.join("replications.csv"),
        &["scenario", "n", "K", "replication", "estimator", "estimate", "ci_lo", "ci_hi"],
    )?;
    for r in grid {
        for (e, kind) in r.estimators.iter().enumerate() {
            for (i, v) in r.estimates[e].iter().enumerate() {
                let ci = r.intervals[e].as_ref().map(|iv| iv[i]);
                t.row(vec![
                    r.label.clone(),
                    r.n.to_string(),
                    r.k.to_string(),
                    i.to_string(),
                    kind.label().to_string(),
                    num(*v),
                    ci.map(|c| num(c.0)).unwrap_or_default(),
                    ci.map(|c| num(c.1)).unwrap_or_default(),
                ])?;
            }
        }
    }
    t.finish()
}

fn summary(s: &SimulateSettings, grid: &[ScenarioResult], truth: OracleValue) -> String {
    let mut out = String::new();
    let b = &s.base;
    let _ = writeln!(out, "mftp simulate: {}", b.label);
    let _ = writeln!(out, "outcome: {:?}  policy: {:?}", b.outcome, b.policy);
    let _ = writeln!(out, "kernel: {:?}  T={} p={} K={} folds={}", b.kernel, b.t, b.p, b.k, b.folds);
    let _ = writeln!(out, "replications: {}  seed: {}", b.replications, b.seed);
    let _ = writeln!(out, "truth: {:.6} (Monte Carlo se {:.2e}, {} draws)", truth.value, truth.se, truth.draws);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>6} {:>12} {:>12} {:>10} {:>9}", "estimator", "n", "mse", "bias", "coverage", "failures");
    for r in grid {
        for c in &r.summaries {
            let cov = c.coverage.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>12.4e} {:>12.4e} {:>10} {:>9}",
                c.estimator.label(),
                c.n,
                c.mse,
                c.bias,
                cov,
                r.failures
            );
        }
    }
    if grid.len() >= 2 {
        let _ = writeln!(out);
        for kind in &b.estimators {
            let pts: Vec<(usize, f64)> = grid.iter().filter_map(|r| r.summary(*kind).map(|c| (c.n, c.mse))).collect();
            if let Ok(slope) = mse_slope(&pts) {
                let _ = writeln!(out, "log-MSE slope {}: {slope:.3}", kind.label());
            }
        }
    }
    out
}
