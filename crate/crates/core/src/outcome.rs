//! Scalar-on-function outcome regression on the FPCA eigenbasis.
//!
//! The coefficient function β(t) is represented as `Σ_j b_j ψ_j(t)`, so the
//! regression runs on the first `K_m` standardized scores plus the scalar
//! covariates. Continuous outcomes use ridge least squares, binary outcomes
//! ridge-penalized logistic regression.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{MftpError, Result};
use crate::fgrid::{Dataset, OutcomeKind};
use crate::fpca::FpcaModel;
use crate::glm::{self, IrlsOptions, LambdaRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

impl From<OutcomeKind> for Link {
    fn from(k: OutcomeKind) -> Self {
        match k {
            OutcomeKind::Continuous => Link::Identity,
            OutcomeKind::Binary => Link::Logit,
        }
    }
}

/// Fitted coefficients, independent of any basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub score_coef: Vec<f64>,
    pub covariate_coef: Vec<f64>,
    pub link: Link,
    pub lambda: f64,
}

impl LinearPredictor {
    pub fn eta(&self, scores: &[f64], x: &[f64]) -> f64 {
        self.intercept
            + self.score_coef.iter().zip(scores).map(|(b, s)| b * s).sum::<f64>()
            + self.covariate_coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn predict(&self, scores: &[f64], x: &[f64]) -> f64 {
        let eta = self.eta(scores, x);
        match self.link {
            Link::Identity => eta,
            Link::Logit => glm::sigmoid(eta),
        }
    }

    /// Fit on a score block (n x K_m) and covariate block (n x p).
    pub fn fit(
        scores: &DMatrix<f64>,
        x: &DMatrix<f64>,
        y: &[f64],
        link: Link,
        rule: LambdaRule,
    ) -> Result<Self> {
        let n = scores.nrows();
        if x.nrows() != n || y.len() != n {
            return Err(MftpError::Dimension(format!(
                "outcome design: {n} score rows, {} covariate rows, {} outcomes",
                x.nrows(),
                y.len()
            )));
        }
        let km = scores.ncols();
        let p = x.ncols();
        let mut design = DMatrix::zeros(n, km + p);
        design.view_mut((0, 0), (n, km)).copy_from(scores);
        design.view_mut((0, km), (n, p)).copy_from(x);
        let (intercept, coef, lambda) = match link {
            Link::Identity => {
                let f = glm::ridge(&design, y, rule)?;
                (f.intercept, f.coef, f.lambda)
            }
            Link::Logit => {
                if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(MftpError::Fit("logit link needs 0/1 outcomes".into()));
                }
                fit_logit(&design, y, rule)?
            }
        };
        Ok(LinearPredictor {
            intercept,
            score_coef: coef[..km].to_vec(),
            covariate_coef: coef[km..].to_vec(),
            link,
            lambda,
        })
    }
}

fn fit_logit(design: &DMatrix<f64>, y: &[f64], rule: LambdaRule) -> Result<(f64, Vec<f64>, f64)> {
    let n = design.nrows() as f64;
    match rule {
        LambdaRule::Fixed(l) => {
            let f = glm::logistic_irls(design, y, IrlsOptions { ridge: l, ..Default::default() })?;
            Ok((f.intercept, f.coef, l))
        }
        LambdaRule::Gcv => {
            // deviance-based GCV, from the heaviest penalty down
            let means: Vec<f64> = design.column_iter().map(|c| c.sum() / n).collect();
            let trace: f64 = design
                .column_iter()
                .zip(&means)
                .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>())
                .sum();
            let mut best: Option<(f64, glm::LogisticFit, f64)> = None;
            for &l in glm::lambda_grid(trace / n).iter().rev() {
                let fit = match glm::logistic_irls(
                    design,
                    y,
                    IrlsOptions { ridge: l, ..Default::default() },
                ) {
                    Ok(f) => f,
                    Err(_) => continue,
                };
                let resid = n - fit.edf;
                if resid <= 0.0 {
                    continue;
                }
                let score = n * fit.deviance / (resid * resid);
                if best.as_ref().is_none_or(|b| score < b.0) {
                    best = Some((score, fit, l));
                }
            }
            let (_, f, l) = best.ok_or_else(|| {
                MftpError::Fit("penalized logistic regression failed for every lambda".into())
            })?;
            Ok((f.intercept, f.coef, l))
        }
    }
}

/// `m̂(x, a(·))` with the basis it was fitted on.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    basis: Arc<FpcaModel>,
    k_m: usize,
    predictor: LinearPredictor,
}

pub fn fit_outcome(
    data: &Dataset,
    basis: Arc<FpcaModel>,
    k_m: usize,
    rule: LambdaRule,
) -> Result<OutcomeModel> {
    if k_m > basis.n_components() {
        return Err(MftpError::config(
            "K_m",
            format!("K_m={k_m} exceeds the {} retained components", basis.n_components()),
        ));
    }
    let p = data.p();
    if data.n() <= 1 + k_m + p {
        log::warn!("outcome model has {} parameters for {} subjects", 1 + k_m + p, data.n());
    }
    let scores = basis.project(&data.curves(), k_m)?;
    let x = covariate_matrix(data);
    let predictor = LinearPredictor::fit(
        &scores.scores,
        &x,
        &data.outcomes(),
        data.outcome_kind().into(),
        rule,
    )?;
    Ok(OutcomeModel { basis, k_m, predictor })
}

pub fn predict_m(model: &OutcomeModel, x: &[f64], curve: &[f64]) -> Result<f64> {
    model.predict(x, curve)
}

impl OutcomeModel {
    pub fn from_parts(basis: Arc<FpcaModel>, predictor: LinearPredictor) -> Result<Self> {
        let k_m = predictor.score_coef.len();
        if k_m > basis.n_components() {
            return Err(MftpError::Dimension(format!(
                "{k_m} score coefficients for {} components",
                basis.n_components()
            )));
        }
        Ok(OutcomeModel { basis, k_m, predictor })
    }

    pub fn predict(&self, x: &[f64], curve: &[f64]) -> Result<f64> {
        if x.len() != self.predictor.covariate_coef.len() {
            return Err(MftpError::Dimension(format!(
                "{} covariates, model expects {}",
                x.len(),
                self.predictor.covariate_coef.len()
            )));
        }
        let scores = self.basis.project_one(curve, self.k_m)?;
        Ok(self.predictor.predict(&scores, x))
    }

    pub fn k_m(&self) -> usize {
        self.k_m
    }

    pub fn basis(&self) -> &Arc<FpcaModel> {
        &self.basis
    }

    pub fn link(&self) -> Link {
        self.predictor.link
    }

    pub fn lambda(&self) -> f64 {
        self.predictor.lambda
    }

    pub fn predictor(&self) -> &LinearPredictor {
        &self.predictor
    }

    /// `[intercept, score terms, covariate terms]`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out = vec![self.predictor.intercept];
        out.extend(&self.predictor.score_coef);
        out.extend(&self.predictor.covariate_coef);
        out
    }

    /// L with |m̂(x,a₁) − m̂(x,a₂)| ≤ L‖a₁ − a₂‖₂.
    pub fn lipschitz_constant(&self) -> f64 {
        let ev = self.basis.eigenvalues();
        let l2 = self
            .predictor
            .score_coef
            .iter()
            .zip(ev)
            .map(|(b, t)| b * b / t)
            .sum::<f64>()
            .sqrt();
        match self.predictor.link {
            Link::Identity => l2,
            Link::Logit => 0.25 * l2,
        }
    }
}

pub(crate) fn covariate_matrix(data: &Dataset) -> DMatrix<f64> {
    let p = data.p();
    DMatrix::from_fn(data.n(), p, |i, j| data.samples()[i].covariates[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgrid::{FunctionalSample, TimeGrid};
    use crate::fpca::KRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::{PI, SQRT_2};

    /// Rank-3 curves with standard normal scores, two covariates.
    fn synth<F: Fn(&[f64], &[f64], &mut ChaCha8Rng) -> f64>(n: usize, seed: u64, f: F) -> Dataset {
        let g = TimeGrid::uniform(60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let xi: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                let values = g
                    .points()
                    .iter()
                    .map(|t| {
                        3.0 * xi[0] * SQRT_2 * (2.0 * PI * t).sin()
                            + 2.0 * xi[1] * SQRT_2 * (2.0 * PI * t).cos()
                            + xi[2] * SQRT_2 * (4.0 * PI * t).sin()
                    })
                    .collect();
                let y = f(&xi, &x, &mut rng);
                FunctionalSample { id: i.to_string(), values, covariates: x, outcome: y }
            })
            .collect();
        Dataset::new(g, samples, None).unwrap()
    }

    #[test]
    fn recovers_generative_coefficients() {
        let d = synth(2000, 1, |xi, x, rng| {
            let e: f64 = StandardNormal.sample(rng);
            2.0 * xi[0] + x[0] + 0.01 * e
        });
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let m = fit_outcome(&d, basis, 3, LambdaRule::Fixed(1e-9)).unwrap();
        let c = m.coefficients();
        assert_eq!(c.len(), 1 + 3 + 2);
        // y is linear in the curve, which is exactly rank 3, so the fit should
        // leave only the 0.01-sd noise behind
        let rss: f64 = d
            .samples()
            .iter()
            .map(|s| (m.predict(&s.covariates, &s.values).unwrap() - s.outcome).powi(2))
            .sum();
        assert!((rss / 2000.0).sqrt() < 0.02, "rms {}", (rss / 2000.0).sqrt());
        assert!((c[4] - 1.0).abs() < 1e-3, "{c:?}");
        assert!(c[5].abs() < 1e-3, "{c:?}");
        let sd = (m.basis().eigenvalues()[0] / 9.0).sqrt();
        assert!((c[1].abs() - 2.0 * sd).abs() < 0.1, "{c:?}");
    }

    #[test]
    fn constant_outcome() {
        let d = synth(200, 2, |_, _, _| 3.25);
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let m = fit_outcome(&d, basis, 3, LambdaRule::Fixed(0.5)).unwrap();
        let c = m.coefficients();
        assert!((c[0] - 3.25).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn prediction_examples() {
        let d = synth(300, 3, |xi, x, rng| {
            let e: f64 = StandardNormal.sample(rng);
            xi[1] - 0.5 * x[1] + e
        });
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let m = fit_outcome(&d, basis.clone(), 3, LambdaRule::Gcv).unwrap();
        let c = m.coefficients();
        let at_mean = m.predict(&[0.0, 0.0], basis.mean()).unwrap();
        assert!((at_mean - c[0]).abs() < 1e-12);
        let bumped: Vec<f64> = basis
            .mean()
            .iter()
            .zip(basis.eigenfunction(0))
            .map(|(a, p)| a + basis.eigenvalues()[0].sqrt() * p)
            .collect();
        let diff = m.predict(&[0.0, 0.0], &bumped).unwrap() - at_mean;
        assert!((diff - c[1]).abs() < 1e-10);
        assert!(m.predict(&[0.0], basis.mean()).is_err());
    }

    #[test]
    fn affine_and_lipschitz_in_curve() {
        let d = synth(300, 4, |xi, _, rng| {
            let e: f64 = StandardNormal.sample(rng);
            xi[0] + xi[2] + e
        });
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let m = fit_outcome(&d, basis, 3, LambdaRule::Gcv).unwrap();
        let l = m.lipschitz_constant();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = d.grid().clone();
        for _ in 0..50 {
            let a: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let b: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let delta: Vec<f64> = (0..60).map(|_| rng.random::<f64>() - 0.5).collect();
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let ma = m.predict(&x, &a).unwrap();
            let mb = m.predict(&x, &b).unwrap();
            let dist = crate::fgrid::l2_distance(&a, &b, &g).unwrap();
            assert!((ma - mb).abs() <= l * dist * (1.0 + 1e-9) + 1e-12);
            let shift_a: Vec<f64> = a.iter().zip(&delta).map(|(u, v)| u + v).collect();
            let shift_b: Vec<f64> = b.iter().zip(&delta).map(|(u, v)| u + v).collect();
            let da = m.predict(&x, &shift_a).unwrap() - ma;
            let db = m.predict(&x, &shift_b).unwrap() - mb;
            assert!((da - db).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_link() {
        let d = synth(800, 5, |xi, _, rng| {
            let p = glm::sigmoid(0.3 + xi[0]);
            if rng.random::<f64>() < p { 1.0 } else { 0.0 }
        });
        assert_eq!(d.outcome_kind(), OutcomeKind::Binary);
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let m = fit_outcome(&d, basis.clone(), 3, LambdaRule::Gcv).unwrap();
        assert_eq!(m.link(), Link::Logit);
        let pr = m.predict(&[0.0, 0.0], basis.mean()).unwrap();
        assert!(pr > 0.0 && pr < 1.0);
        let zero = LinearPredictor {
            intercept: 0.0,
            score_coef: vec![0.0; 3],
            covariate_coef: vec![0.0; 2],
            link: Link::Logit,
            lambda: 0.0,
        };
        assert_eq!(zero.predict(&[1.0, 2.0, 3.0], &[4.0, 5.0]), 0.5);
    }

    #[test]
    fn gcv_is_reproducible() {
        let d = synth(250, 6, |xi, x, rng| {
            let e: f64 = StandardNormal.sample(rng);
            xi[0] * 0.3 + x[0] + e
        });
        let basis = Arc::new(crate::fpca::fit_fpca(&d, KRule::Fixed(3)).unwrap());
        let a = fit_outcome(&d, basis.clone(), 3, LambdaRule::Gcv).unwrap();
        let b = fit_outcome(&d, basis, 3, LambdaRule::Gcv).unwrap();
        assert_eq!(a.lambda(), b.lambda());
        assert_eq!(a.coefficients(), b.coefficients());
    }
}
