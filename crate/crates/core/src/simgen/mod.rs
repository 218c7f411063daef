//! Synthetic functional-treatment data: Gaussian-process curves, confounded
//! covariates, simple and complex outcome models, Monte Carlo ground truth,
//! and the replication harness.

mod gp;
mod scenario;

pub use gp::{sample_gp, GpSampler, Kernel};
pub use scenario::{
    k_sweep, mse_slope, run_scenario, run_scenario_grid, spearman, write_figure_csvs, CellSummary,
    ScenarioResult, SimConfig, SweepResult,
};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{MftpError, Result};
use crate::fgrid::{Dataset, FunctionalSample, OutcomeKind, TimeGrid};
use crate::policy::TreatmentPolicy;
use crate::util::derive_seed;

/// |η_A| floor inside the logarithm of the complex model.
pub const ETA_FLOOR: f64 = 1e-8;
/// Grid points averaged for the Bernoulli and Poisson rates.
const FIRST_BLOCK: std::ops::Range<usize> = 0..10;
const SECOND_BLOCK: std::ops::Range<usize> = 10..20;

/// a_0(t) = 2 + sin(2πt) + 0.5 sin(4πt).
pub fn default_mean(t: f64) -> f64 {
    2.0 + (2.0 * PI * t).sin() + 0.5 * (4.0 * PI * t).sin()
}

/// β(t) = 0.084 − (t − 0.5)².
pub fn beta(t: f64) -> f64 {
    0.084 - (t - 0.5).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeModelKind {
    Simple,
    Complex,
}

/// How the Bernoulli success probability is scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BernoulliScale {
    /// Divide by the largest first-block average in the sample.
    SampleMax,
    /// Divide by a fixed constant.
    Fixed(f64),
}

fn block_mean(curve: &[f64], r: std::ops::Range<usize>) -> f64 {
    let s = &curve[r];
    s.iter().sum::<f64>() / s.len() as f64
}

fn check_cov_shape(p: usize, t: usize) -> Result<()> {
    if p % 3 != 0 {
        return Err(MftpError::config("p", format!("p={p} must be divisible by 3")));
    }
    if t < SECOND_BLOCK.end {
        return Err(MftpError::config("T", format!("T={t}; covariates need at least 20 grid points")));
    }
    Ok(())
}

fn covariate_row(curve: &[f64], p: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let third = p / 3;
    let mu = curve.iter().sum::<f64>() / curve.len() as f64;
    let pr = if scale > 0.0 { (block_mean(curve, FIRST_BLOCK) / scale).clamp(0.0, 1.0) } else { 0.0 };
    let lambda = (block_mean(curve, SECOND_BLOCK) / 3.0).abs().floor();
    let normal = Normal::new(mu, 1.0).expect("unit sd");
    let bern = Bernoulli::new(pr).expect("clamped probability");
    let mut x = Vec::with_capacity(p);
    x.extend((0..third).map(|_| normal.sample(rng)));
    x.extend((0..third).map(|_| f64::from(u8::from(bern.sample(rng)))));
    if lambda > 0.0 {
        let pois = Poisson::new(lambda).expect("positive rate");
        x.extend((0..third).map(|_| pois.sample(rng)));
    } else {
        x.extend((0..third).map(|_| 0.0));
    }
    x
}

fn covariates_with(curves: &[Vec<f64>], p: usize, scale: BernoulliScale, seed: u64) -> Result<Vec<Vec<f64>>> {
    let t = curves.first().map_or(SECOND_BLOCK.end, |c| c.len());
    check_cov_shape(p, t)?;
    let s = match scale {
        BernoulliScale::SampleMax => {
            curves.iter().map(|c| block_mean(c, FIRST_BLOCK)).fold(0.0, f64::max)
        }
        BernoulliScale::Fixed(v) => v,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(curves.iter().map(|c| covariate_row(c, p, s, &mut rng)).collect())
}

/// Per subject: p/3 normal(mean of the curve, 1), p/3 Bernoulli with rate
/// proportional to the first-block average, p/3 Poisson with rate
/// ⌊|second-block average| / 3⌋.
pub fn gen_covariates(curves: &[Vec<f64>], p: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    covariates_with(curves, p, BernoulliScale::SampleMax, seed)
}

/// Outcome mean model with its fixed covariate coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSpec {
    pub kind: OutcomeModelKind,
    pub beta_x: Vec<f64>,
}

impl OutcomeSpec {
    /// β_X drawn from Uniform(−1, 1) with `seed`.
    pub fn draw(kind: OutcomeModelKind, p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).expect("valid range");
        OutcomeSpec { kind, beta_x: (0..p).map(|_| u.sample(&mut rng)).collect() }
    }

    /// η_A = ∫ A(t) β(t) dt by quadrature.
    pub fn eta_a(&self, grid: &TimeGrid, curve: &[f64]) -> f64 {
        grid.weights().iter().zip(grid.points()).zip(curve).map(|((w, t), a)| w * beta(*t) * a).sum()
    }

    pub fn mean(&self, grid: &TimeGrid, curve: &[f64], x: &[f64]) -> f64 {
        let eta_a = self.eta_a(grid, curve);
        let eta_x: f64 = self.beta_x.iter().zip(x).map(|(b, v)| b * v).sum();
        match self.kind {
            OutcomeModelKind::Simple => eta_a + eta_x / (x.len() as f64).sqrt(),
            OutcomeModelKind::Complex => {
                let l = eta_a.abs().max(ETA_FLOOR).ln();
                -2.0 * l * l + eta_a * x[0] + eta_x + x[1] * x[2] * x[2] / 5.0
            }
        }
    }
}

/// Y = μ_Y + N(0, 1).
pub fn gen_outcome(
    grid: &TimeGrid,
    curves: &[Vec<f64>],
    x: &[Vec<f64>],
    spec: &OutcomeSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    if curves.len() != x.len() {
        return Err(MftpError::Dimension(format!("{} curves, {} covariate rows", curves.len(), x.len())));
    }
    if spec.kind == OutcomeModelKind::Complex && spec.beta_x.len() < 3 {
        return Err(MftpError::config("p", "the complex outcome needs at least 3 covariates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    curves
        .iter()
        .zip(x)
        .map(|(c, xi)| {
            grid.check_len(c.len())?;
            let e: f64 = StandardNormal.sample(&mut rng);
            Ok(spec.mean(grid, c, xi) + e)
        })
        .collect()
}

/// A fully specified data-generating process.
#[derive(Debug, Clone)]
pub struct Population {
    pub grid: TimeGrid,
    pub mean_fn: Vec<f64>,
    pub sampler: GpSampler,
    pub p: usize,
    pub outcome: OutcomeSpec,
    /// Fixed Bernoulli normalizer (population mean + 4 sd of the
    /// first-block average), shared by every draw.
    pub bernoulli_scale: f64,
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub se: f64,
    pub draws: usize,
}

/// One simulated sample with the noise-free outcome means kept alongside.
#[derive(Debug, Clone)]
pub struct Draw {
    pub curves: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
}

const ORACLE_CHUNK: usize = 10_000;

impl Population {
    pub fn new(
        grid: TimeGrid,
        mean_fn: Vec<f64>,
        kernel: Kernel,
        p: usize,
        outcome: OutcomeSpec,
    ) -> Result<Self> {
        grid.check_len(mean_fn.len())?;
        check_cov_shape(p, grid.len())?;
        if outcome.beta_x.len() != p {
            return Err(MftpError::Dimension(format!("{} covariate coefficients for p={p}", outcome.beta_x.len())));
        }
        let sampler = GpSampler::new(kernel, &grid)?;
        let km = kernel.matrix(&grid);
        let b = FIRST_BLOCK.len() as f64;
        let var: f64 = FIRST_BLOCK.flat_map(|i| FIRST_BLOCK.map(move |j| (i, j))).map(|(i, j)| km[(i, j)]).sum::<f64>() / (b * b);
        let bernoulli_scale = block_mean(&mean_fn, FIRST_BLOCK) + 4.0 * var.sqrt();
        Ok(Population { grid, mean_fn, sampler, p, outcome, bernoulli_scale })
    }

    pub fn draw(&self, n: usize, seed: u64) -> Result<Draw> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let m = self.sampler.sample_matrix(n, &mut rng);
        let curves: Vec<Vec<f64>> = m
            .column_iter()
            .map(|c| c.iter().zip(&self.mean_fn).map(|(a, m)| a + m).collect())
            .collect();
        let x = covariates_with(&curves, self.p, BernoulliScale::Fixed(self.bernoulli_scale), derive_seed(seed, 1))?;
        let mu: Vec<f64> = curves.iter().zip(&x).map(|(c, xi)| self.outcome.mean(&self.grid, c, xi)).collect();
        let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let y = mu
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(&mut nrng);
                m + e
            })
            .collect();
        Ok(Draw { curves, x, y, mu })
    }

    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let d = self.draw(n, seed)?;
        self.to_dataset(d)
    }

    pub fn to_dataset(&self, d: Draw) -> Result<Dataset> {
        let samples = d
            .curves
            .into_iter()
            .zip(d.x)
            .zip(d.y)
            .enumerate()
            .map(|(i, ((values, covariates), outcome))| FunctionalSample {
                id: format!("s{i}"),
                values,
                covariates,
                outcome,
            })
            .collect();
        Dataset::new(self.grid.clone(), samples, Some(OutcomeKind::Continuous))
    }

    /// True outcome mean at a (possibly modified) curve.
    pub fn mu(&self, curve: &[f64], x: &[f64]) -> f64 {
        self.outcome.mean(&self.grid, curve, x)
    }

    /// E[μ_Y(X, q(X, A))] over `draws` fresh subjects, in parallel chunks.
    pub fn oracle_truth(&self, policy: &dyn TreatmentPolicy, draws: usize, seed: u64) -> Result<OracleValue> {
        if draws < 2 {
            return Err(MftpError::config("oracle_n", "need at least 2 oracle draws"));
        }
        let chunks = draws.div_ceil(ORACLE_CHUNK);
        let sums: Vec<(f64, f64, usize)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let size = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
                let m: DMatrix<f64> = self.sampler.sample_matrix(size, &mut rng);
                let mut cov_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5EED, c as u64));
                let (mut s, mut s2) = (0.0, 0.0);
                for col in m.column_iter() {
                    let curve: Vec<f64> = col.iter().zip(&self.mean_fn).map(|(a, m)| a + m).collect();
                    let x = covariate_row(&curve, self.p, self.bernoulli_scale, &mut cov_rng);
                    let q = policy.apply(&self.grid, &x, &curve)?;
                    let v = self.mu(&q, &x);
                    s += v;
                    s2 += v * v;
                }
                Ok((s, s2, size))
            })
            .collect::<Result<Vec<_>>>()?;
        let (s, s2, n) = sums.iter().fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        let nf = n as f64;
        let value = s / nf;
        let var = (s2 / nf - value * value).max(0.0) * nf / (nf - 1.0);
        Ok(OracleValue { value, se: (var / nf).sqrt(), draws: n })
    }

    /// True outcome means at observed and modified curves, for injecting
    /// known outcome regressions into the doubly robust estimator.
    pub fn true_regressions(&self, data: &Dataset, policy: &dyn TreatmentPolicy) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut obs = Vec::with_capacity(data.n());
        let mut shifted = Vec::with_capacity(data.n());
        for s in data.samples() {
            obs.push(self.mu(&s.values, &s.covariates));
            let q = policy.apply(&self.grid, &s.covariates, &s.values)?;
            shifted.push(self.mu(&q, &s.covariates));
        }
        Ok((obs, shifted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{AdditiveShift, ModificationPolicy};

    fn pop(kind: OutcomeModelKind) -> Population {
        let grid = TimeGrid::uniform(100).unwrap();
        let mean: Vec<f64> = grid.points().iter().map(|t| default_mean(*t)).collect();
        Population::new(grid, mean, Kernel::SquaredExponential { sigma: 0.05 }, 15, OutcomeSpec::draw(kind, 15, 3))
            .unwrap()
    }

    #[test]
    fn covariate_layout_and_degenerate_curves() {
        let zeros = vec![vec![0.0; 100]; 4];
        let x = gen_covariates(&zeros, 15, 1).unwrap();
        assert_eq!(x[0].len(), 15);
        for row in &x {
            assert!(row[5..15].iter().all(|v| *v == 0.0));
        }
        assert!(gen_covariates(&zeros, 14, 1).is_err());
        assert!(gen_covariates(&[vec![0.0; 12]], 3, 1).is_err());
    }

    #[test]
    fn normal_columns_track_curve_means() {
        let p = pop(OutcomeModelKind::Simple);
        let d = p.draw(3000, 5).unwrap();
        let mu_bar = d.curves.iter().map(|c| c.iter().sum::<f64>() / 100.0).sum::<f64>() / 3000.0;
        let col = d.x.iter().map(|r| r[0]).sum::<f64>() / 3000.0;
        // sd of X_1 is at most sqrt(1 + var(mu_i)) < 1.5
        assert!((col - mu_bar).abs() < 3.0 * 1.5 / 3000f64.sqrt());
        assert!(d.x.iter().all(|r| r[5..10].iter().all(|v| *v == 0.0 || *v == 1.0)));
    }

    #[test]
    fn outcome_examples() {
        let grid = TimeGrid::uniform(201).unwrap();
        assert_eq!(beta(0.5), 0.084);
        let simple = OutcomeSpec::draw(OutcomeModelKind::Simple, 3, 1);
        assert_eq!(simple.mean(&grid, &vec![0.0; 201], &[0.0; 3]), 0.0);
        let eta = simple.eta_a(&grid, &vec![1.0; 201]);
        assert!((eta - (0.084 - 1.0 / 12.0)).abs() < 1e-5, "{eta}");
        let complex = OutcomeSpec::draw(OutcomeModelKind::Complex, 3, 1);
        assert!(complex.mean(&grid, &vec![0.0; 201], &[0.0; 3]).is_finite());
        assert!(simple.beta_x.iter().all(|b| (-1.0..1.0).contains(b)));
    }

    #[test]
    fn oracle_identity_matches_observational_mean() {
        let p = pop(OutcomeModelKind::Simple);
        let o = p.oracle_truth(&ModificationPolicy::Identity, 40_000, 1).unwrap();
        let d = p.draw(40_000, 2).unwrap();
        let m = d.y.iter().sum::<f64>() / 40_000.0;
        let sd = (d.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 39_999.0).sqrt();
        let se = (o.se.powi(2) + sd * sd / 40_000.0).sqrt();
        assert!((o.value - m).abs() < 4.0 * se, "{} vs {m} (se {se})", o.value);
    }

    #[test]
    fn oracle_additive_shift_is_linear() {
        let p = pop(OutcomeModelKind::Simple);
        let d = p.dataset(2000, 3).unwrap();
        let basis = crate::fpca::fit_fpca(&d, crate::fpca::KRule::Fixed(2)).unwrap();
        let shift = AdditiveShift::along_component(&basis, 0, 1.0);
        let base = p.oracle_truth(&ModificationPolicy::Identity, 20_000, 4).unwrap();
        let moved = p.oracle_truth(&shift, 20_000, 4).unwrap();
        // same draws, so the difference is exact up to rounding
        let expect = p.outcome.eta_a(&p.grid, &shift.delta);
        assert!((moved.value - base.value - expect).abs() < 1e-10);
    }

    #[test]
    fn oracle_is_chunk_deterministic() {
        let p = pop(OutcomeModelKind::Complex);
        let pol = ModificationPolicy::scale_warp(0.8, 1.2).unwrap();
        let a = p.oracle_truth(&pol, 25_000, 9).unwrap();
        let b = p.oracle_truth(&pol, 25_000, 9).unwrap();
        assert_eq!(a, b);
        let c = p.oracle_truth(&ModificationPolicy::scale_warp(1.0, 1.2).unwrap(), 25_000, 9).unwrap();
        assert_ne!(a.value, c.value);
    }
}
