//! Functional principal component analysis on a shared dense grid.
//!
//! The covariance operator is discretized as `C W` where `C` is the sample
//! covariance of the curves and `W` the trapezoid weights. Its eigenpairs are
//! obtained from the symmetric matrix `W^{1/2} C W^{1/2}` and mapped back, so
//! the eigenfunctions are orthonormal in the quadrature inner product.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{MftpError, Result};
use crate::fgrid::{Dataset, TimeGrid};

const EIGEN_FLOOR_ABS: f64 = 1e-10;
const EIGEN_FLOOR_REL: f64 = 1e-8;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KRule {
    Fixed(usize),
    /// Smallest K whose cumulative variance fraction reaches the threshold.
    VarianceFraction(f64),
}

impl Default for KRule {
    fn default() -> Self {
        KRule::VarianceFraction(0.95)
    }
}

#[derive(Debug, Clone)]
pub struct FpcaModel {
    grid: TimeGrid,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// T x J, column j is ψ_j on the grid.
    eigenfunctions: DMatrix<f64>,
    k: usize,
}

/// Standardized principal component scores, one row per curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: DMatrix<f64>,
    pub standardized: bool,
}

impl ScoreMatrix {
    pub fn nrows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.scores.row(i).iter().copied().collect()
    }
}

pub fn fit_fpca(data: &Dataset, rule: KRule) -> Result<FpcaModel> {
    FpcaModel::fit(data.grid(), &data.curves(), rule)
}

pub fn project_scores(model: &FpcaModel, curves: &[&[f64]]) -> Result<ScoreMatrix> {
    model.project(curves, model.k())
}

pub fn reconstruct(model: &FpcaModel, scores: &[f64]) -> Result<Vec<f64>> {
    model.reconstruct(scores)
}

pub fn tail_residual(model: &FpcaModel, k: usize) -> Result<f64> {
    model.tail_residual(k)
}

impl FpcaModel {
    pub fn fit(grid: &TimeGrid, curves: &[&[f64]], rule: KRule) -> Result<Self> {
        let n = curves.len();
        if n < 2 {
            return Err(MftpError::InsufficientData(format!("FPCA needs n >= 2 curves, got {n}")));
        }
        let t = grid.len();
        for c in curves {
            grid.check_len(c.len())?;
        }
        let mut mean = vec![0.0; t];
        for c in curves {
            for (m, v) in mean.iter_mut().zip(c.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let sqrt_w: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        // rows: W^{1/2}(a_i - mean)
        let centered = DMatrix::from_fn(n, t, |i, j| (curves[i][j] - mean[j]) * sqrt_w[j]);
        let mut cov = centered.tr_mul(&centered);
        cov /= n as f64;
        // enforce exact symmetry
        for i in 0..t {
            for j in 0..i {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let diag_max = cov.diagonal().max();
        let diag_min = cov.diagonal().min();
        let eig = SymmetricEigen::try_new(cov, 1e-14, 10_000).ok_or_else(|| {
            MftpError::Numeric(format!(
                "symmetric eigensolver did not converge (T={t}, diagonal range [{diag_min:e}, {diag_max:e}])"
            ))
        })?;

        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let floor = EIGEN_FLOOR_ABS.max(EIGEN_FLOOR_REL * top);
        let kept: Vec<usize> =
            order.into_iter().filter(|&c| eig.eigenvalues[c] >= floor).collect();

        let weights = grid.weights();
        let mut eigenvalues = Vec::with_capacity(kept.len());
        let mut eigenfunctions = DMatrix::zeros(t, kept.len());
        for (j, &c) in kept.iter().enumerate() {
            eigenvalues.push(eig.eigenvalues[c]);
            let mut psi: Vec<f64> =
                (0..t).map(|r| eig.eigenvectors[(r, c)] / sqrt_w[r]).collect();
            let norm: f64 =
                psi.iter().zip(weights).map(|(p, w)| w * p * p).sum::<f64>().sqrt();
            psi.iter_mut().for_each(|p| *p /= norm);
            if should_flip(&psi, weights) {
                psi.iter_mut().for_each(|p| *p = -*p);
            }
            eigenfunctions.set_column(j, &nalgebra::DVector::from_vec(psi));
        }

        let j_max = eigenvalues.len();
        let k = match rule {
            KRule::Fixed(k) if k > j_max => {
                return Err(MftpError::config(
                    "K",
                    format!("fixed K={k} exceeds the {j_max} retained components"),
                ))
            }
            KRule::Fixed(k) => k,
            KRule::VarianceFraction(rho) => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(MftpError::config("rho", format!("must be in (0, 1], got {rho}")));
                }
                variance_k(&eigenvalues, rho)
            }
        };
        Ok(FpcaModel { grid: grid.clone(), mean, eigenvalues, eigenfunctions, k })
    }

    /// Assemble a model from stored parts (see [`FpcaModel::read_bundle`]).
    pub fn from_parts(
        grid: TimeGrid,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenfunctions: DMatrix<f64>,
        k: usize,
    ) -> Result<Self> {
        grid.check_len(mean.len())?;
        if eigenfunctions.nrows() != grid.len() || eigenfunctions.ncols() != eigenvalues.len() {
            return Err(MftpError::Dimension(format!(
                "eigenfunctions are {}x{}, expected {}x{}",
                eigenfunctions.nrows(),
                eigenfunctions.ncols(),
                grid.len(),
                eigenvalues.len()
            )));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(MftpError::Numeric("eigenvalues must be positive and nonincreasing".into()));
        }
        if k > eigenvalues.len() {
            return Err(MftpError::config("K", format!("K={k} exceeds {}", eigenvalues.len())));
        }
        Ok(FpcaModel { grid, mean, eigenvalues, eigenfunctions, k })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunction(&self, j: usize) -> Vec<f64> {
        self.eigenfunctions.column(j).iter().copied().collect()
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    /// Number of retained components J.
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Same basis with a different truncation level.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        if k > self.n_components() {
            return Err(MftpError::config(
                "K",
                format!("K={k} exceeds the {} retained components", self.n_components()),
            ));
        }
        Ok(FpcaModel { k, ..self.clone() })
    }

    /// Smallest K reaching the variance fraction `rho`.
    pub fn k_for_fraction(&self, rho: f64) -> usize {
        variance_k(&self.eigenvalues, rho)
    }

    /// T x m matrix whose columns are `W ψ_j / sqrt(θ_j)`.
    fn projector(&self, m: usize) -> DMatrix<f64> {
        let w = self.grid.weights();
        DMatrix::from_fn(self.grid.len(), m, |r, j| {
            w[r] * self.eigenfunctions[(r, j)] / self.eigenvalues[j].sqrt()
        })
    }

    /// Standardized scores on the first `m` components.
    pub fn project(&self, curves: &[&[f64]], m: usize) -> Result<ScoreMatrix> {
        if m > self.n_components() {
            return Err(MftpError::Dimension(format!(
                "requested {m} scores, model has {} components",
                self.n_components()
            )));
        }
        let t = self.grid.len();
        for c in curves {
            self.grid.check_len(c.len())?;
        }
        let centered = DMatrix::from_fn(curves.len(), t, |i, j| curves[i][j] - self.mean[j]);
        let scores = centered * self.projector(m);
        Ok(ScoreMatrix { scores, standardized: true })
    }

    pub fn project_one(&self, curve: &[f64], m: usize) -> Result<Vec<f64>> {
        Ok(self.project(&[curve], m)?.row(0))
    }

    /// `a_0 + Σ_j sqrt(θ_j) s_j ψ_j` over the supplied scores.
    pub fn reconstruct(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() > self.n_components() {
            return Err(MftpError::Dimension(format!(
                "{} scores for a model with {} components",
                scores.len(),
                self.n_components()
            )));
        }
        let mut out = self.mean.clone();
        for (j, s) in scores.iter().enumerate() {
            let amp = self.eigenvalues[j].sqrt() * s;
            for (o, psi) in out.iter_mut().zip(self.eigenfunctions.column(j).iter()) {
                *o += amp * psi;
            }
        }
        Ok(out)
    }

    /// Δ_K = Σ_{j>K} θ_j over the retained spectrum.
    pub fn tail_residual(&self, k: usize) -> Result<f64> {
        if k > self.n_components() {
            return Err(MftpError::Dimension(format!(
                "K={k} out of range 0..={}",
                self.n_components()
            )));
        }
        Ok(self.tail_residuals()[k])
    }

    /// All Δ_K for K = 0..=J, accumulated from the smallest eigenvalue up.
    pub fn tail_residuals(&self) -> Vec<f64> {
        let j = self.n_components();
        let mut out = vec![0.0; j + 1];
        for k in (0..j).rev() {
            out[k] = out[k + 1] + self.eigenvalues[k];
        }
        out
    }

    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MftpError::io(dir, e))?;
        let mut w = csv_writer(&dir.join("model.csv"))?;
        w.write_record(["key", "value"])?;
        w.write_record(["schema_version", "1"])?;
        w.write_record(["k", &self.k.to_string()])?;
        w.write_record(["n_grid", &self.grid.len().to_string()])?;
        w.write_record(["n_components", &self.n_components().to_string()])?;
        w.flush().map_err(|e| MftpError::io(dir, e))?;

        let mut w = csv_writer(&dir.join("mean.csv"))?;
        w.write_record(["t_original", "t", "mean"])?;
        for j in 0..self.grid.len() {
            w.write_record([
                self.grid.original_points()[j].to_string(),
                self.grid.points()[j].to_string(),
                self.mean[j].to_string(),
            ])?;
        }
        w.flush().map_err(|e| MftpError::io(dir, e))?;

        let mut w = csv_writer(&dir.join("eigenvalues.csv"))?;
        w.write_record(["j", "eigenvalue", "tail_residual"])?;
        let tails = self.tail_residuals();
        for (j, v) in self.eigenvalues.iter().enumerate() {
            w.write_record([(j + 1).to_string(), v.to_string(), tails[j + 1].to_string()])?;
        }
        w.flush().map_err(|e| MftpError::io(dir, e))?;

        let mut w = csv_writer(&dir.join("eigenfunctions.csv"))?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_components()).map(|j| format!("psi_{j}")));
        w.write_record(&header)?;
        for r in 0..self.grid.len() {
            let mut rec = vec![self.grid.points()[r].to_string()];
            rec.extend(self.eigenfunctions.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| MftpError::io(dir, e))?;
        Ok(())
    }

    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let meta = read_rows(&dir.join("model.csv"))?;
        let lookup = |key: &str| -> Result<usize> {
            meta.iter()
                .find(|r| r[0] == key)
                .and_then(|r| r[1].parse().ok())
                .ok_or_else(|| MftpError::config(format!("model.csv:{key}"), "missing or invalid"))
        };
        let k = lookup("k")?;
        let n_components = lookup("n_components")?;

        let mean_rows = read_rows(&dir.join("mean.csv"))?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| MftpError::config(what.to_string(), format!("not a number: {s}")))
        };
        let mut times = Vec::new();
        let mut mean = Vec::new();
        for r in &mean_rows {
            times.push(parse(&r[0], "mean.csv:t_original")?);
            mean.push(parse(&r[2], "mean.csv:mean")?);
        }
        let grid = TimeGrid::new(times)?;
        let eigenvalues = read_rows(&dir.join("eigenvalues.csv"))?
            .iter()
            .map(|r| parse(&r[1], "eigenvalues.csv:eigenvalue"))
            .collect::<Result<Vec<_>>>()?;
        if eigenvalues.len() != n_components {
            return Err(MftpError::Dimension("eigenvalue count disagrees with model.csv".into()));
        }
        let ef_rows = read_rows(&dir.join("eigenfunctions.csv"))?;
        let mut ef = DMatrix::zeros(ef_rows.len(), n_components);
        for (r, rec) in ef_rows.iter().enumerate() {
            if rec.len() != n_components + 1 {
                return Err(MftpError::Dimension(format!("eigenfunctions.csv row {}", r + 1)));
            }
            for j in 0..n_components {
                ef[(r, j)] = parse(&rec[j + 1], "eigenfunctions.csv")?;
            }
        }
        FpcaModel::from_parts(grid, mean, eigenvalues, ef, k)
    }
}

fn variance_k(eigenvalues: &[f64], rho: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (j, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc / total >= rho - 1e-12 {
            return j + 1;
        }
    }
    eigenvalues.len()
}

/// Quadrature-weighted sum made nonnegative; near-ties fall back to the
/// first clearly nonzero coordinate.
fn should_flip(psi: &[f64], w: &[f64]) -> bool {
    let s: f64 = psi.iter().zip(w).map(|(p, w)| p * w).sum();
    let scale: f64 = psi.iter().zip(w).map(|(p, w)| p.abs() * w).sum();
    if s.abs() > 1e-10 * scale {
        return s < 0.0;
    }
    let big = psi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    psi.iter().find(|p| p.abs() > 1e-8 * big).is_some_and(|p| *p < 0.0)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| MftpError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = std::fs::File::open(path).map_err(|e| MftpError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(out)
}

/// Which decay law fits the tail residuals better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayLaw {
    /// log Δ_K linear in K.
    Exponential,
    /// log Δ_K linear in log K.
    Polynomial,
    /// The retained spectrum is too short to fit a law.
    FiniteRank,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub law: DecayLaw,
    /// Slope of the preferred law (per component, or log-log).
    pub slope: f64,
    pub exponential: Option<LawFit>,
    pub polynomial: Option<LawFit>,
    /// Inclusive K range used for the fits.
    pub k_range: (usize, usize),
    pub tail_residuals: Vec<f64>,
    pub rank: usize,
}

/// Fit exponential and polynomial laws to Δ_K over the reliable range.
///
/// The range starts at K=1 and stops at the last K with
/// `Δ_K >= 1e-6 Δ_0`, and never goes past a third of the retained
/// spectrum, where discretization and sampling noise dominate.
pub fn decay_diagnostic(model: &FpcaModel) -> Result<DecayReport> {
    let rank = model.n_components();
    let tails = model.tail_residuals();
    if rank <= 4 {
        return Ok(DecayReport {
            law: DecayLaw::FiniteRank,
            slope: f64::NEG_INFINITY,
            exponential: None,
            polynomial: None,
            k_range: (1, rank),
            tail_residuals: tails,
            rank,
        });
    }
    let cutoff = 1e-6 * tails[0];
    let hi_cap = (rank / 3).max(4).min(rank - 1);
    let mut hi = 0;
    for (k, &d) in tails.iter().enumerate().take(hi_cap + 1).skip(1) {
        if d >= cutoff && d > 0.0 {
            hi = k;
        } else {
            break;
        }
    }
    if hi < 4 {
        return Err(MftpError::DiagnosticUnavailable(format!(
            "only {hi} positive tail residuals in the reliable range"
        )));
    }
    let ks: Vec<f64> = (1..=hi).map(|k| k as f64).collect();
    let ys: Vec<f64> = (1..=hi).map(|k| tails[k].ln()).collect();
    let exp_fit = least_squares(&ks, &ys);
    let logk: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let poly_fit = least_squares(&logk, &ys);
    let (law, slope) = if exp_fit.r_squared >= poly_fit.r_squared {
        (DecayLaw::Exponential, exp_fit.slope)
    } else {
        (DecayLaw::Polynomial, poly_fit.slope)
    };
    Ok(DecayReport {
        law,
        slope,
        exponential: Some(exp_fit),
        polynomial: Some(poly_fit),
        k_range: (1, hi),
        tail_residuals: tails,
        rank,
    })
}

pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> LawFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    LawFit { slope, intercept, r_squared }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgrid::inner_product;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::{PI, SQRT_2};

    /// Curves 2 ξ1 φ1 + ξ2 φ2 with φ1 = √2 sin(2πt), φ2 = √2 cos(2πt).
    fn rank_two(n: usize, t: usize, seed: u64) -> (TimeGrid, Vec<Vec<f64>>) {
        let grid = TimeGrid::uniform(t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curves = (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                grid.points()
                    .iter()
                    .map(|&s| 2.0 * a * SQRT_2 * (2.0 * PI * s).sin() + b * SQRT_2 * (2.0 * PI * s).cos())
                    .collect()
            })
            .collect();
        (grid, curves)
    }

    fn refs(c: &[Vec<f64>]) -> Vec<&[f64]> {
        c.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn recovers_rank_two_spectrum() {
        let (grid, curves) = rank_two(2000, 101, 7);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(2)).unwrap();
        assert_eq!(m.n_components(), 2, "floor removes the null space");
        assert!((m.eigenvalues()[0] - 4.0).abs() < 0.4, "{:?}", m.eigenvalues());
        assert!((m.eigenvalues()[1] - 1.0).abs() < 0.1, "{:?}", m.eigenvalues());
        assert!(m.tail_residual(2).unwrap() == 0.0);
    }

    #[test]
    fn identical_curves_have_no_components() {
        let grid = TimeGrid::uniform(20).unwrap();
        let c: Vec<f64> = grid.points().iter().map(|t| t * t).collect();
        let curves = vec![c.clone(); 5];
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::default()).unwrap();
        assert_eq!(m.n_components(), 0);
        assert_eq!(m.k(), 0);
        for (a, b) in m.mean().iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn needs_two_curves() {
        let grid = TimeGrid::uniform(5).unwrap();
        let c = vec![0.0; 5];
        assert!(matches!(
            FpcaModel::fit(&grid, &[&c], KRule::default()),
            Err(MftpError::InsufficientData(_))
        ));
    }

    fn wiener(n: usize, t: usize, seed: u64) -> (TimeGrid, Vec<Vec<f64>>) {
        let grid = TimeGrid::new((1..=t).map(|j| j as f64 / t as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = (1.0 / t as f64).sqrt();
        let curves = (0..n)
            .map(|_| {
                let mut acc = 0.0;
                (0..t)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        acc += dt * z;
                        acc
                    })
                    .collect()
            })
            .collect();
        (grid, curves)
    }

    #[test]
    fn basis_properties_and_scores() {
        let (grid, curves) = wiener(1500, 60, 3);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(6)).unwrap();
        let ev = m.eigenvalues();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]) && ev.iter().all(|&v| v > 0.0));
        for a in 0..m.n_components() {
            for b in 0..m.n_components() {
                let ip = inner_product(&m.eigenfunction(a), &m.eigenfunction(b), &grid).unwrap();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-8, "({a},{b}) {ip}");
            }
            let s: f64 = m.eigenfunction(a).iter().zip(grid.weights()).map(|(p, w)| p * w).sum();
            assert!(s >= -1e-9);
        }
        let sc = project_scores(&m, &refs(&curves)).unwrap();
        let n = sc.nrows() as f64;
        for a in 0..6 {
            let col = sc.scores.column(a);
            let mean = col.sum() / n;
            assert!(mean.abs() < 1e-10);
            for b in 0..6 {
                let cov = col.dot(&sc.scores.column(b)) / n;
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov - want).abs() < 3.0 / n.sqrt(), "({a},{b}) {cov}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let (grid, curves) = wiener(400, 40, 5);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(3)).unwrap();
        let zero = m.project_one(m.mean(), 3).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
        let bumped: Vec<f64> = m
            .mean()
            .iter()
            .zip(m.eigenfunction(0))
            .map(|(a, p)| a + m.eigenvalues()[0].sqrt() * p)
            .collect();
        let s = m.project_one(&bumped, 3).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-10 && s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
        assert_eq!(m.reconstruct(&[0.0, 0.0, 0.0]).unwrap(), m.mean());
        assert!(m.project_one(&[0.0; 39], 3).is_err());
    }

    #[test]
    fn reconstruction_error_matches_tail() {
        let (grid, curves) = wiener(300, 30, 11);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(4)).unwrap();
        let sc = project_scores(&m, &refs(&curves)).unwrap();
        let mut err = 0.0;
        for (i, c) in curves.iter().enumerate() {
            let r = m.reconstruct(&sc.row(i)).unwrap();
            err += crate::fgrid::l2_distance(&r, c, &grid).unwrap().powi(2);
        }
        err /= curves.len() as f64;
        let tail = m.tail_residual(4).unwrap();
        assert!(err <= tail + 1e-6, "{err} vs {tail}");
        // Parseval: the retained components explain everything above the floor
        assert!((err - tail).abs() < 1e-6);

        let full = m.with_k(m.n_components()).unwrap();
        let sc = project_scores(&full, &refs(&curves)).unwrap();
        for (i, c) in curves.iter().enumerate().take(20) {
            let r = full.reconstruct(&sc.row(i)).unwrap();
            assert!(crate::fgrid::l2_distance(&r, c, &grid).unwrap() < 1e-8);
        }
    }

    #[test]
    fn tail_residual_telescopes() {
        let (grid, curves) = wiener(200, 25, 2);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::default()).unwrap();
        let j = m.n_components();
        assert_eq!(m.tail_residual(j).unwrap(), 0.0);
        assert!((m.tail_residual(0).unwrap() - m.total_variance()).abs() < 1e-12);
        for k in 1..=j {
            let d = m.tail_residual(k - 1).unwrap() - m.tail_residual(k).unwrap();
            assert!((d - m.eigenvalues()[k - 1]).abs() <= 1e-15 * m.total_variance());
            assert!(m.tail_residual(k).unwrap() <= m.tail_residual(k - 1).unwrap());
        }
        assert!(m.tail_residual(j + 1).is_err());
    }

    #[test]
    fn variance_rule_and_fixed_rule() {
        let (grid, curves) = wiener(300, 30, 4);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::VarianceFraction(0.95)).unwrap();
        let ev = m.eigenvalues();
        let frac = |k: usize| ev[..k].iter().sum::<f64>() / m.total_variance();
        assert!(frac(m.k()) >= 0.95 - 1e-12 && frac(m.k() - 1) < 0.95);
        let m4 = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(4)).unwrap();
        assert_eq!(m4.k(), 4);
        assert!(FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(500)).is_err());
    }

    #[test]
    fn rank_two_decay_is_finite_rank() {
        let (grid, curves) = rank_two(500, 50, 1);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(2)).unwrap();
        let r = decay_diagnostic(&m).unwrap();
        assert_eq!(r.law, DecayLaw::FiniteRank);
        assert_eq!(r.rank, 2);
        assert!(r.tail_residuals[2].abs() < 1e-12);
    }

    #[test]
    fn bundle_round_trip() {
        let (grid, curves) = wiener(100, 15, 8);
        let m = FpcaModel::fit(&grid, &refs(&curves), KRule::Fixed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.write_bundle(dir.path()).unwrap();
        let back = FpcaModel::read_bundle(dir.path()).unwrap();
        assert_eq!(back.k(), 3);
        assert_eq!(back.eigenvalues(), m.eigenvalues());
        assert_eq!(back.mean(), m.mean());
        assert_eq!(back.eigenfunctions(), m.eigenfunctions());
    }
}
