//! Ridge least squares with generalized cross-validation, and penalized
//! logistic regression by iteratively reweighted least squares.
//!
//! Designs never carry an intercept column; the intercept is handled
//! separately and is never penalized.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MftpError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// Generalized cross-validation over 25 log-spaced values in
    /// `[1e-6, 1e2] * trace(Gram) / n`.
    Gcv,
    Fixed(f64),
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Gcv
    }
}

pub const GCV_GRID_POINTS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom, intercept included.
    pub edf: f64,
    pub gcv: f64,
}

pub fn lambda_grid(trace_over_n: f64) -> Vec<f64> {
    let scale = if trace_over_n > 0.0 { trace_over_n } else { 1.0 };
    let (lo, hi) = (1e-6f64.ln(), 1e2f64.ln());
    (0..GCV_GRID_POINTS)
        .map(|i| scale * (lo + (hi - lo) * i as f64 / (GCV_GRID_POINTS - 1) as f64).exp())
        .collect()
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter().map(|c| c.sum() / n).collect()
}

/// Ridge regression of `y` on `x` plus an unpenalized intercept.
pub fn ridge(x: &DMatrix<f64>, y: &[f64], rule: LambdaRule) -> Result<LinearFit> {
    let n = x.nrows();
    let d = x.ncols();
    if y.len() != n {
        return Err(MftpError::Dimension(format!("{} outcomes for {n} design rows", y.len())));
    }
    if n == 0 {
        return Err(MftpError::InsufficientData("empty design".into()));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    if d == 0 {
        return Ok(LinearFit { intercept: ybar, coef: vec![], lambda: 0.0, edf: 1.0, gcv: f64::NAN });
    }
    let means = column_means(x);
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let gram = xc.tr_mul(&xc);
    let r = xc.tr_mul(&yc);
    let yy = yc.norm_squared();
    let eig = SymmetricEigen::try_new(gram.clone(), 1e-14, 10_000)
        .ok_or_else(|| MftpError::Numeric("Gram eigendecomposition did not converge".into()))?;
    let ls: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let z = eig.eigenvectors.tr_mul(&r);
    let top = ls.iter().cloned().fold(0.0f64, f64::max);

    let score = |lambda: f64| -> Option<(f64, f64)> {
        let mut rss = yy;
        let mut edf = 1.0;
        for (l, zi) in ls.iter().zip(z.iter()) {
            let denom = l + lambda;
            if denom <= 1e-12 * top.max(1e-300) {
                if zi.abs() > 0.0 && *l <= 0.0 && lambda <= 0.0 {
                    return None;
                }
                continue;
            }
            rss -= zi * zi * (2.0 / denom - l / (denom * denom));
            edf += l / denom;
        }
        let rss = rss.max(0.0);
        let resid_df = n as f64 - edf;
        let gcv = if resid_df > 0.0 { n as f64 * rss / (resid_df * resid_df) } else { f64::INFINITY };
        Some((gcv, edf))
    };

    let lambda = match rule {
        LambdaRule::Fixed(l) if l < 0.0 || !l.is_finite() => {
            return Err(MftpError::config("lambda", format!("must be >= 0, got {l}")))
        }
        LambdaRule::Fixed(l) => l,
        LambdaRule::Gcv => {
            let grid = lambda_grid(gram.trace() / n as f64);
            let mut best = (f64::INFINITY, grid[0]);
            for &l in &grid {
                if let Some((g, _)) = score(l) {
                    if g < best.0 {
                        best = (g, l);
                    }
                }
            }
            best.1
        }
    };
    let min_denom = ls.iter().cloned().fold(f64::INFINITY, f64::min) + lambda;
    if min_denom <= 1e-10 * top.max(1e-300) && top > 0.0 {
        return Err(MftpError::Numeric(format!(
            "singular penalized normal equations (lambda={lambda:e}, smallest eigenvalue {:e})",
            min_denom - lambda
        )));
    }
    if top == 0.0 {
        // every column constant: slopes are not identified, ridge sets them to zero
        return Ok(LinearFit { intercept: ybar, coef: vec![0.0; d], lambda, edf: 1.0, gcv: f64::NAN });
    }
    let scaled = DVector::from_iterator(d, z.iter().zip(&ls).map(|(zi, l)| zi / (l + lambda)));
    let b = &eig.eigenvectors * scaled;
    let intercept = ybar - b.iter().zip(&means).map(|(bi, m)| bi * m).sum::<f64>();
    let (gcv, edf) = score(lambda).unwrap_or((f64::NAN, f64::NAN));
    Ok(LinearFit { intercept, coef: b.iter().copied().collect(), lambda, edf, gcv })
}

pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some coefficient exceeded `separation_bound`; the fit stopped early.
    pub separation: bool,
    pub deviance: f64,
    /// Effective degrees of freedom at the solution, intercept included.
    pub edf: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub separation_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { ridge: 0.0, max_iter: IRLS_MAX_ITER, tol: IRLS_TOL, separation_bound: f64::INFINITY }
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn penalized_deviance(x: &DMatrix<f64>, z: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let dev: f64 = eta.iter().zip(z).map(|(e, zi)| 2.0 * (softplus(*e) - zi * e)).sum();
    dev + ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Logistic regression of `z ∈ {0,1}` on `x` with an intercept. A ridge
/// penalty on the slopes is optional. Step-halving keeps the penalized
/// deviance from increasing.
pub fn logistic_irls(x: &DMatrix<f64>, z: &[f64], opts: IrlsOptions) -> Result<LogisticFit> {
    let n = x.nrows();
    let d = x.ncols();
    if z.len() != n {
        return Err(MftpError::Dimension(format!("{} labels for {n} rows", z.len())));
    }
    let zbar = z.iter().sum::<f64>() / n as f64;
    if zbar <= 0.0 || zbar >= 1.0 {
        return Err(MftpError::Fit("logistic fit needs both classes present".into()));
    }
    let mut xi = DMatrix::from_element(n, d + 1, 1.0);
    xi.view_mut((0, 1), (n, d)).copy_from(x);
    let mut beta = DVector::zeros(d + 1);
    beta[0] = (zbar / (1.0 - zbar)).ln();
    let mut dev = penalized_deviance(&xi, z, &beta, opts.ridge);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;
    let zv = DVector::from_column_slice(z);

    let mut penalty = DMatrix::identity(d + 1, d + 1) * opts.ridge;
    penalty[(0, 0)] = 0.0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let eta = &xi * &beta;
        let p = eta.map(sigmoid);
        let w = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut grad = xi.tr_mul(&(&zv - &p));
        let mut pen_beta = beta.clone() * opts.ridge;
        pen_beta[0] = 0.0;
        grad -= pen_beta;
        let mut xw = xi.clone();
        for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let hess = xi.tr_mul(&xw) + &penalty;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess
                .lu()
                .solve(&grad)
                .ok_or_else(|| MftpError::Numeric("singular IRLS system".into()))?,
        };
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut new_dev = penalized_deviance(&xi, z, &candidate, opts.ridge);
        let mut halvings = 0;
        while !(new_dev <= dev + 1e-12 * dev.abs().max(1.0)) && halvings < 30 {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            new_dev = penalized_deviance(&xi, z, &candidate, opts.ridge);
            halvings += 1;
        }
        let change = (&step * scale).amax();
        beta = candidate;
        dev = new_dev;
        trace.push(dev);
        if beta.rows(1, d).amax() > opts.separation_bound {
            separation = true;
            break;
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && !separation {
        let tail: Vec<String> = trace.iter().rev().take(5).map(|v| format!("{v:.6e}")).collect();
        return Err(MftpError::Fit(format!(
            "IRLS did not converge in {} iterations (recent deviance: {})",
            opts.max_iter,
            tail.join(", ")
        )));
    }
    // effective degrees of freedom tr((H + P)^{-1} H)
    let eta = &xi * &beta;
    let w = eta.map(|e| {
        let p = sigmoid(e);
        (p * (1.0 - p)).max(1e-12)
    });
    let mut xw = xi.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let h = xi.tr_mul(&xw);
    let edf = (h.clone() + &penalty).lu().solve(&h).map(|m| m.trace()).unwrap_or(f64::NAN);
    Ok(LogisticFit {
        intercept: beta[0],
        coef: beta.rows(1, d).iter().copied().collect(),
        iterations,
        converged,
        separation,
        deviance: dev,
        edf,
    })
}
