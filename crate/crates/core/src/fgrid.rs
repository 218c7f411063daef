//! Functional-data primitives: time grids, quadrature inner products and
//! dataset validation.
//!
//! Curves are stored as their values on a shared, strictly increasing grid.
//! Integrals use the trapezoid rule on the grid normalized to `[0, 1]`, so
//! non-uniform grids need no resampling.

use crate::error::{MftpError, Result, Violation};

/// Strictly increasing observation times, normalized internally to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    original: Vec<f64>,
    normalized: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(MftpError::Grid(format!("need at least 2 points, got {}", points.len())));
        }
        if let Some(bad) = points.iter().find(|t| !t.is_finite()) {
            return Err(MftpError::Grid(format!("non-finite time point {bad}")));
        }
        if let Some(j) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(MftpError::Grid(format!(
                "points must be strictly increasing (t[{}]={} >= t[{}]={})",
                j,
                points[j],
                j + 1,
                points[j + 1]
            )));
        }
        let lo = points[0];
        let span = points[points.len() - 1] - lo;
        let normalized: Vec<f64> = points.iter().map(|t| (t - lo) / span).collect();
        let weights = trapezoid_weights(&normalized);
        Ok(TimeGrid { original: points, normalized, weights })
    }

    /// `len` equally spaced points covering `[0, 1]` inclusive.
    pub fn uniform(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(MftpError::Grid(format!("need at least 2 points, got {len}")));
        }
        let step = 1.0 / (len - 1) as f64;
        Self::new((0..len).map(|j| j as f64 * step).collect())
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.normalized
    }

    pub fn original_points(&self) -> &[f64] {
        &self.original
    }

    /// Trapezoid weights on the normalized grid; they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Map a time in original units to normalized time.
    pub fn normalize(&self, t: f64) -> f64 {
        let lo = self.original[0];
        (t - lo) / (self.original[self.original.len() - 1] - lo)
    }

    /// Inverse of [`TimeGrid::normalize`].
    pub fn denormalize(&self, u: f64) -> f64 {
        let lo = self.original[0];
        lo + u * (self.original[self.original.len() - 1] - lo)
    }

    /// Linear interpolation of a curve at normalized time `u`, clamped to
    /// the grid range.
    pub fn interpolate(&self, values: &[f64], u: f64) -> f64 {
        let pts = &self.normalized;
        let last = pts.len() - 1;
        if u <= pts[0] {
            return values[0];
        }
        if u >= pts[last] {
            return values[last];
        }
        // first index with pts[idx] > u; 1 <= idx <= last
        let idx = pts.partition_point(|&t| t <= u);
        let (t0, t1) = (pts[idx - 1], pts[idx]);
        let frac = (u - t0) / (t1 - t0);
        values[idx - 1] + frac * (values[idx] - values[idx - 1])
    }

    /// Quadrature integral of a single curve.
    pub fn integrate(&self, f: &[f64]) -> Result<f64> {
        self.check_len(f.len())?;
        Ok(self.weights.iter().zip(f).map(|(w, v)| w * v).sum())
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(MftpError::Dimension(format!(
                "curve has {len} values, grid has {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let m = t.len();
    let mut w = vec![0.0; m];
    for j in 0..m - 1 {
        let h = 0.5 * (t[j + 1] - t[j]);
        w[j] += h;
        w[j + 1] += h;
    }
    w
}

/// ⟨f, g⟩ = ∫ f(t) g(t) dt by the trapezoid rule on the normalized grid.
pub fn inner_product(f: &[f64], g: &[f64], grid: &TimeGrid) -> Result<f64> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    Ok(grid.weights().iter().zip(f.iter().zip(g)).map(|(w, (a, b))| w * a * b).sum())
}

pub fn l2_distance(f: &[f64], g: &[f64], grid: &TimeGrid) -> Result<f64> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    let ss: f64 = grid
        .weights()
        .iter()
        .zip(f.iter().zip(g))
        .map(|(w, (a, b))| w * (a - b) * (a - b))
        .sum();
    Ok(ss.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

impl OutcomeKind {
    /// Binary iff every outcome is exactly 0 or 1.
    pub fn detect(outcomes: &[f64]) -> Self {
        if !outcomes.is_empty() && outcomes.iter().all(|&y| y == 0.0 || y == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    }
}

/// One subject: treatment curve on the dataset grid, covariates, outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSample {
    pub id: String,
    pub values: Vec<f64>,
    pub covariates: Vec<f64>,
    pub outcome: f64,
}

/// Subjects sharing one [`TimeGrid`] and covariate dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    grid: TimeGrid,
    samples: Vec<FunctionalSample>,
    outcome_kind: OutcomeKind,
}

impl Dataset {
    /// Validates every sample against the grid. `kind` overrides outcome
    /// type detection.
    pub fn new(
        grid: TimeGrid,
        samples: Vec<FunctionalSample>,
        kind: Option<OutcomeKind>,
    ) -> Result<Self> {
        let p = samples.first().map(|s| s.covariates.len()).unwrap_or(0);
        let mut violations = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let row = i + 1;
            if s.values.len() != grid.len() {
                violations.push(Violation {
                    row,
                    field: "A".into(),
                    message: format!(
                        "grid mismatch: {} curve values, grid has {} points",
                        s.values.len(),
                        grid.len()
                    ),
                });
            } else if let Some(j) = s.values.iter().position(|v| !v.is_finite()) {
                violations.push(Violation {
                    row,
                    field: format!("A@{}", grid.original_points()[j]),
                    message: "non-finite curve value".into(),
                });
            }
            if s.covariates.len() != p {
                violations.push(Violation {
                    row,
                    field: "X".into(),
                    message: format!(
                        "covariate length mismatch: {} (expected {p})",
                        s.covariates.len()
                    ),
                });
            } else if let Some(j) = s.covariates.iter().position(|v| !v.is_finite()) {
                violations.push(Violation {
                    row,
                    field: format!("X_{}", j + 1),
                    message: "non-finite covariate".into(),
                });
            }
            if !s.outcome.is_finite() {
                violations.push(Violation {
                    row,
                    field: "Y".into(),
                    message: "non-finite outcome".into(),
                });
            }
        }
        if !violations.is_empty() {
            return Err(MftpError::Validation(violations));
        }
        let detected = OutcomeKind::detect(&samples.iter().map(|s| s.outcome).collect::<Vec<_>>());
        let outcome_kind = kind.unwrap_or(detected);
        if outcome_kind == OutcomeKind::Binary && detected != OutcomeKind::Binary {
            let row = samples.iter().position(|s| s.outcome != 0.0 && s.outcome != 1.0).unwrap_or(0);
            return Err(MftpError::Validation(vec![Violation {
                row: row + 1,
                field: "Y".into(),
                message: "binary outcome requested but value is not 0/1".into(),
            }]));
        }
        Ok(Dataset { grid, samples, outcome_kind })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[FunctionalSample] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn p(&self) -> usize {
        self.samples.first().map(|s| s.covariates.len()).unwrap_or(0)
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.outcome).collect()
    }

    pub fn curves(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.values.as_slice()).collect()
    }

    pub fn mean_outcome(&self) -> f64 {
        self.samples.iter().map(|s| s.outcome).sum::<f64>() / self.n() as f64
    }

    /// Subset (with repetition) by subject index, keeping grid and kind.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            grid: self.grid.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            outcome_kind: self.outcome_kind,
        }
    }
}

/// One parsed input row before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub id: String,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub values: Vec<f64>,
}

/// Turn parsed rows into a [`Dataset`], collecting every violation.
pub fn validate_dataset(
    grid_points: Vec<f64>,
    rows: Vec<RawRow>,
    kind: Option<OutcomeKind>,
) -> Result<Dataset> {
    let grid = TimeGrid::new(grid_points)?;
    let samples = rows
        .into_iter()
        .map(|r| FunctionalSample {
            id: r.id,
            values: r.values,
            covariates: r.covariates,
            outcome: r.outcome,
        })
        .collect();
    Dataset::new(grid, samples, kind)
}
