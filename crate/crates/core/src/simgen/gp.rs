//! Zero-mean Gaussian-process curves on a grid.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MftpError, Result};
use crate::fgrid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// exp(−(t − s)² / (2σ²)).
    SquaredExponential { sigma: f64 },
    /// Half-integer Matérn with smoothness `nu` ∈ {0.5, 1.5, 2.5} and range `rho`.
    Matern { nu: f64, rho: f64 },
    /// Brownian motion started at 0, covariance min(s, t).
    Wiener,
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::SquaredExponential { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(MftpError::config("kernel.sigma", format!("sigma={sigma} must be positive")))
            }
            Kernel::Matern { nu, rho } => {
                if ![0.5, 1.5, 2.5].contains(&nu) {
                    return Err(MftpError::config("kernel.nu", format!("nu={nu}; supported 0.5, 1.5, 2.5")));
                }
                if !(rho > 0.0 && rho.is_finite()) {
                    return Err(MftpError::config("kernel.rho", format!("rho={rho} must be positive")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn cov(&self, s: f64, t: f64) -> f64 {
        match *self {
            Kernel::SquaredExponential { sigma } => (-(s - t).powi(2) / (2.0 * sigma * sigma)).exp(),
            Kernel::Matern { nu, rho } => {
                let r = (s - t).abs() / rho;
                if nu == 0.5 {
                    (-r).exp()
                } else if nu == 1.5 {
                    let a = 3f64.sqrt() * r;
                    (1.0 + a) * (-a).exp()
                } else {
                    let a = 5f64.sqrt() * r;
                    (1.0 + a + a * a / 3.0) * (-a).exp()
                }
            }
            Kernel::Wiener => s.min(t),
        }
    }

    pub fn matrix(&self, grid: &TimeGrid) -> DMatrix<f64> {
        let t = grid.points();
        DMatrix::from_fn(t.len(), t.len(), |i, j| self.cov(t[i], t[j]))
    }
}

/// Relative size below which kernel eigenvalues are dropped from the factor.
const RANK_TOL: f64 = 1e-12;
/// Jitter levels (relative to the largest eigenvalue) tried before giving up.
const JITTERS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Draws curves as `L z` with `L Lᵀ` the kernel matrix, or by cumulative
/// increments for the Wiener process.
#[derive(Debug, Clone)]
pub struct GpSampler {
    kernel: Kernel,
    /// T x r factor; unused for Wiener.
    factor: DMatrix<f64>,
    points: Vec<f64>,
}

impl GpSampler {
    pub fn new(kernel: Kernel, grid: &TimeGrid) -> Result<Self> {
        kernel.validate()?;
        let points = grid.points().to_vec();
        if kernel == Kernel::Wiener {
            return Ok(GpSampler { kernel, factor: DMatrix::zeros(0, 0), points });
        }
        let k = kernel.matrix(grid);
        let t = k.nrows();
        for &jit in &JITTERS {
            let scale = k.diagonal().max();
            let kj = &k + DMatrix::identity(t, t) * (jit * scale);
            let Some(eig) = SymmetricEigen::try_new(kj, 1e-14, 10_000) else {
                continue;
            };
            let top = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            if min < -1e-8 * top {
                continue;
            }
            let keep: Vec<usize> = (0..t).filter(|&j| eig.eigenvalues[j] > RANK_TOL * top).collect();
            let factor = DMatrix::from_fn(t, keep.len(), |r, c| {
                eig.eigenvectors[(r, keep[c])] * eig.eigenvalues[keep[c]].sqrt()
            });
            return Ok(GpSampler { kernel, factor, points });
        }
        Err(MftpError::Numeric(format!(
            "kernel matrix is not positive semidefinite on the {t}-point grid after jitter"
        )))
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn rank(&self) -> usize {
        if self.kernel == Kernel::Wiener {
            self.points.len()
        } else {
            self.factor.ncols()
        }
    }

    /// `n` curves, column-major in a T x n matrix.
    pub fn sample_matrix(&self, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let t = self.points.len();
        if self.kernel == Kernel::Wiener {
            let mut out = DMatrix::zeros(t, n);
            for c in 0..n {
                let mut w = 0.0;
                let mut prev = 0.0;
                for (r, &u) in self.points.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    w += (u - prev).sqrt() * z;
                    prev = u;
                    out[(r, c)] = w;
                }
            }
            return out;
        }
        let r = self.factor.ncols();
        let z = DMatrix::from_fn(r, n, |_, _| StandardNormal.sample(rng));
        &self.factor * z
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let m = self.sample_matrix(n, rng);
        m.column_iter().map(|c| c.iter().copied().collect()).collect()
    }
}

pub fn sample_gp(kernel: Kernel, grid: &TimeGrid, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let s = GpSampler::new(kernel, grid)?;
    Ok(s.sample(n, &mut ChaCha8Rng::seed_from_u64(seed)))
}
