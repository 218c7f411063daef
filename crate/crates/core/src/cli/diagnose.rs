//! `mftp fpca-diagnose`: FPCA bundle plus the tail-residual decay report.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::io::read_dataset;
use super::report::{num, write_text, Table};
use crate::error::{MftpError, Result};
use crate::fpca::{decay_diagnostic, fit_fpca, DecayLaw, DecayReport, FpcaModel, KRule};

pub fn run_diagnose(cfg: &RunConfig) -> Result<(FpcaModel, Option<DecayReport>)> {
    let input = cfg.input.as_ref().ok_or_else(|| MftpError::config("input", "missing"))?;
    let data = read_dataset(input, cfg.outcome_binary)?.data;
    let rule = match cfg.k {
        Some(k) => KRule::Fixed(k),
        None => KRule::VarianceFraction(cfg.variance_fraction),
    };
    let model = fit_fpca(&data, rule)?;
    model.write_bundle(&cfg.out.join("fpca"))?;

    let tails = model.tail_residuals();
    let total = model.total_variance();
    let mut t = Table::create(&cfg.out.join("decay.csv"), &["K", "tail_residual", "tail_fraction", "log_K", "log_tail"])?;
    for (k, d) in tails.iter().enumerate().skip(1) {
        let log_tail = if *d > 0.0 { num(d.ln()) } else { String::new() };
        t.row(vec![k.to_string(), num(*d), num(d / total), num((k as f64).ln()), log_tail])?;
    }
    t.finish()?;

    let report = match decay_diagnostic(&model) {
        Ok(r) => Some(r),
        Err(MftpError::DiagnosticUnavailable(m)) => {
            log::warn!("decay law not fitted: {m}");
            None
        }
        Err(e) => return Err(e),
    };
    let mut s = String::new();
    let _ = writeln!(s, "mftp fpca-diagnose");
    let _ = writeln!(s, "subjects: {}  grid points: {}", data.n(), data.grid().len());
    let _ = writeln!(s, "retained components: {}  selected K: {}", model.n_components(), model.k());
    let _ = writeln!(s, "total variance: {total:.6e}");
    for (j, v) in model.eigenvalues().iter().take(10).enumerate() {
        let _ = writeln!(s, "  theta_{:<3} {:.6e}  tail {:.6e}", j + 1, v, tails[j + 1]);
    }
    match &report {
        None => {
            let _ = writeln!(s, "decay law: unavailable");
        }
        Some(r) => {
            let law = match r.law {
                DecayLaw::Exponential => "exponential (log tail linear in K)",
                DecayLaw::Polynomial => "polynomial (log tail linear in log K)",
                DecayLaw::FiniteRank => "finite rank",
            };
            let _ = writeln!(s, "decay law: {law}");
            let _ = writeln!(s, "fit range: K = {}..{}", r.k_range.0, r.k_range.1);
            if let Some(f) = r.exponential {
                let _ = writeln!(s, "  exponential: slope {:.4}, R^2 {:.4}", f.slope, f.r_squared);
            }
            if let Some(f) = r.polynomial {
                let _ = writeln!(s, "  polynomial:  slope {:.4}, R^2 {:.4}", f.slope, f.r_squared);
            }
        }
    }
    write_text(&cfg.out.join("summary.txt"), &s)?;
    Ok((model, report))
}
