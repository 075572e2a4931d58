//! Conditional distributions from a joint sample.
//!
//! With `P = P_X ⊗ P_Y` and `Q = P_(X,Y)` the density ratio is the
//! conditional density of `Y` given `X` relative to `P_Y`. Conditional
//! expectations are then weighted averages over an auxiliary sample `ȳ` of
//! `P_Y`, with weights given by the positive part of the fitted ratio,
//! normalized to sum to one.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{KdmError, Result};
use crate::estimator::{cross_validate, fit, CvReport, FitOptions, KdmModel, PriorKind, PriorSpec};
use crate::kernels::{cross_kernel_matrix, KernelFamily, KernelSpec};

/// Row-aligned realizations of `(X, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    pub x: Dataset,
    pub y: Dataset,
}

impl JointDataset {
    pub fn new(x: Dataset, y: Dataset) -> Result<Self> {
        if x.len() != y.len() {
            return Err(KdmError::invalid(format!(
                "x and y row counts differ: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        Ok(JointDataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Concatenates `x_i` and `y_j` into one product-space point.
    fn pair(&self, i: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.x.row(i).iter().chain(self.y.row(j)).copied()
    }

    fn pairs(&self, idx: impl Iterator<Item = (usize, usize)>) -> Result<Dataset> {
        let d = self.x.dim() + self.y.dim();
        let mut values = Vec::new();
        let mut n = 0;
        for (i, j) in idx {
            values.extend(self.pair(i, j));
            n += 1;
        }
        Dataset::new(n, d, values)
    }

    /// Joint rows `(x_i, y_i)` as one dataset.
    pub fn joined(&self) -> Result<Dataset> {
        self.pairs((0..self.len()).map(|i| (i, i)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    /// `3n` rows: `z_P,i = (x_{2i-1}, y_{2i})`, `z_Q,i = (x_{2n+i}, y_{2n+i})`.
    ThreeSplit,
    /// `n` rows: `z_P,i = (x_i, y_{i+1})` with wraparound, `z_Q,i = (x_i, y_i)`.
    /// Uses every row but the two samples are dependent, which biases the
    /// estimate.
    #[default]
    Shifted,
}

impl std::str::FromStr for SplitScheme {
    type Err = KdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shifted" | "shift" => Ok(SplitScheme::Shifted),
            "threesplit" | "three-split" | "three" => Ok(SplitScheme::ThreeSplit),
            other => Err(KdmError::invalid(format!("unknown split scheme {other:?}"))),
        }
    }
}

/// Builds the product-measure sample `z_P` and the joint sample `z_Q`.
pub fn split_joint_sample(joint: &JointDataset, scheme: SplitScheme) -> Result<(Dataset, Dataset)> {
    let rows = joint.len();
    match scheme {
        SplitScheme::ThreeSplit => {
            if rows == 0 || !rows.is_multiple_of(3) {
                return Err(KdmError::invalid(format!(
                    "three-way split needs a positive multiple of 3 rows, got {rows}"
                )));
            }
            let n = rows / 3;
            // 0-based: x_{2i}, y_{2i+1} for i < n; x_{2n+i}, y_{2n+i}
            let p = joint.pairs((0..n).map(|i| (2 * i, 2 * i + 1)))?;
            let q = joint.pairs((0..n).map(|i| (2 * n + i, 2 * n + i)))?;
            Ok((p, q))
        }
        SplitScheme::Shifted => {
            if rows < 2 {
                return Err(KdmError::invalid(format!(
                    "shifted split needs at least 2 rows, got {rows}"
                )));
            }
            let p = joint.pairs((0..rows).map(|i| (i, (i + 1) % rows)))?;
            let q = joint.pairs((0..rows).map(|i| (i, i)))?;
            Ok((p, q))
        }
    }
}

/// Default cap on the auxiliary `ȳ` sample size.
pub const DEFAULT_GRID_CAP: usize = 2000;

/// Uniform subsample of `k` rows of `y` by reservoir sampling, kept in the
/// original row order.
pub fn reservoir_rows(y: &Dataset, k: usize, seed: u64) -> Dataset {
    let n = y.len();
    if k >= n {
        return y.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (0..k).collect();
    for i in k..n {
        let j = rng.random_range(0..=i);
        if j < k {
            chosen[j] = i;
        }
    }
    chosen.sort_unstable();
    y.select_rows(&chosen)
}

/// How a joint sample is turned into a conditional model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalOptions {
    pub scheme: SplitScheme,
    /// Maximum size of the `ȳ` grid.
    pub grid_cap: usize,
    /// Z-score the product-space coordinates before fitting; queries and the
    /// `ȳ` grid stay in input coordinates.
    pub standardize: bool,
    /// Seeds grid subsampling and cross-validation folds.
    pub seed: u64,
}

impl Default for ConditionalOptions {
    fn default() -> Self {
        ConditionalOptions {
            scheme: SplitScheme::default(),
            grid_cap: DEFAULT_GRID_CAP,
            standardize: false,
            seed: 0,
        }
    }
}

impl ConditionalOptions {
    fn prepare(&self, joint: &JointDataset) -> Result<(Dataset, Dataset)> {
        let (p, q) = split_joint_sample(joint, self.scheme)?;
        if !self.standardize {
            return Ok((p, q));
        }
        let t = Standardization::fit(&[&p, &q])?;
        Ok((p.standardized(&t)?, q.standardized(&t)?))
    }

    fn finish(&self, base: KdmModel, joint: &JointDataset) -> Result<ConditionalModel> {
        let y_grid = reservoir_rows(&joint.y, self.grid_cap.max(1), self.seed);
        ConditionalModel::new(base, y_grid, self.scheme, joint.x.dim())
    }
}

/// Fitted density ratio on `X × Y` with an auxiliary `ȳ` grid.
#[derive(Debug, Clone)]
pub struct ConditionalModel {
    pub base: KdmModel,
    pub y_grid: Dataset,
    pub scheme: SplitScheme,
    pub dim_x: usize,
}

/// Normalized weights over the `ȳ` grid at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalWeights {
    pub weights: Vec<f64>,
    /// Every clipped ratio was zero and uniform weights were substituted.
    pub degenerate: bool,
}

/// Positive-part normalization of raw ratio values.
pub fn normalize_positive(raw: &[f64]) -> ConditionalWeights {
    let clipped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 && total.is_finite() {
        ConditionalWeights {
            weights: clipped.iter().map(|v| v / total).collect(),
            degenerate: false,
        }
    } else {
        let u = 1.0 / raw.len() as f64;
        ConditionalWeights {
            weights: vec![u; raw.len()],
            degenerate: true,
        }
    }
}

/// Conditional mean and covariance of `Y` at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub degenerate: bool,
}

impl ConditionalModel {
    pub fn new(base: KdmModel, y_grid: Dataset, scheme: SplitScheme, dim_x: usize) -> Result<Self> {
        if y_grid.is_empty() {
            return Err(KdmError::invalid("y grid is empty"));
        }
        if base.dim() != dim_x + y_grid.dim() {
            return Err(KdmError::DimensionMismatch {
                expected: base.dim(),
                got: dim_x + y_grid.dim(),
            });
        }
        Ok(ConditionalModel {
            base,
            y_grid,
            scheme,
            dim_x,
        })
    }

    pub fn dim_y(&self) -> usize {
        self.y_grid.dim()
    }

    /// Splits the joint sample, fits the ratio, and takes `ȳ` from the
    /// training `y` rows (subsampled to at most `grid_cap`).
    pub fn fit(
        joint: &JointDataset,
        kernel: &KernelSpec,
        lambda: f64,
        options: &FitOptions,
        cond: &ConditionalOptions,
    ) -> Result<Self> {
        let (p, q) = cond.prepare(joint)?;
        let base = fit(&p, &q, kernel, lambda, &PriorSpec::one(), options)?;
        cond.finish(base, joint)
    }

    /// As [`ConditionalModel::fit`], with `(kernel, λ)` chosen by
    /// cross-validation over `grid`.
    pub fn fit_cv(
        joint: &JointDataset,
        grid: &[(KernelSpec, f64)],
        folds: usize,
        options: &FitOptions,
        cond: &ConditionalOptions,
    ) -> Result<(Self, CvReport)> {
        let (p, q) = cond.prepare(joint)?;
        let cv = cross_validate(&p, &q, grid, folds, &PriorSpec::one(), options, cond.seed)?;
        let base = fit(&p, &q, &cv.best_kernel, cv.best_lambda, &PriorSpec::one(), options)?;
        Ok((cond.finish(base, joint)?, cv))
    }

    /// Raw ratio values `p_star(x, ȳ_i) + h(x, ȳ_i)` over the grid.
    pub fn raw_ratios(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim_x {
            return Err(KdmError::DimensionMismatch {
                expected: self.dim_x,
                got: x.len(),
            });
        }
        let mut z = Vec::with_capacity(self.base.dim());
        self.y_grid
            .rows()
            .map(|y| {
                z.clear();
                z.extend_from_slice(x);
                z.extend_from_slice(y);
                self.base.eval_density_ratio(&z, false)
            })
            .collect()
    }

    pub fn conditional_weights(&self, x: &[f64]) -> Result<ConditionalWeights> {
        let w = normalize_positive(&self.raw_ratios(x)?);
        if w.degenerate {
            log::warn!("all conditional ratios clipped to zero; using uniform weights");
        }
        Ok(w)
    }

    /// `Σ_i w_i f(ȳ_i)` for `f_values` aligned with the grid.
    pub fn conditional_expectation(&self, x: &[f64], f_values: &[f64]) -> Result<f64> {
        if f_values.len() != self.y_grid.len() {
            return Err(KdmError::DimensionMismatch {
                expected: self.y_grid.len(),
                got: f_values.len(),
            });
        }
        let w = self.conditional_weights(x)?;
        Ok(weighted_sum(&w.weights, f_values))
    }

    pub fn conditional_moments(&self, x: &[f64]) -> Result<ConditionalMoments> {
        let w = self.conditional_weights(x)?;
        let (mean, covariance) = weighted_moments(&w.weights, &self.y_grid);
        Ok(ConditionalMoments {
            mean,
            covariance,
            degenerate: w.degenerate,
        })
    }

    /// Conditional weights for many query points at once.
    ///
    /// For the Gaussian kernel `k((x, y), (x', y')) = k(x, x') k(y, y')`, so
    /// the ratio over all queries and grid points is the matrix product
    /// `K_x diag(β) K_yᵀ`; other kernels and custom priors are evaluated
    /// point by point. Queries are processed in fixed-size blocks, so the
    /// result does not depend on the number of threads.
    pub fn conditional_weights_batch(&self, queries: &Dataset) -> Result<Vec<ConditionalWeights>> {
        if queries.dim() != self.dim_x {
            return Err(KdmError::DimensionMismatch {
                expected: self.dim_x,
                got: queries.dim(),
            });
        }
        let base = &self.base;
        let separable = base.kernel.family == KernelFamily::Gaussian && base.prior.kind != PriorKind::Custom;
        if !separable {
            let rows: Vec<&[f64]> = queries.rows().collect();
            return rows.par_iter().map(|x| self.conditional_weights(x)).collect();
        }
        let prior = base.prior.eval(&vec![0.0; base.dim()])?;
        let dx = self.dim_x;
        let to_model = |data: &Dataset, offset: usize| -> Result<Dataset> {
            let Some(t) = &base.standardization else {
                return Ok(data.clone());
            };
            let d = data.dim();
            let mut values = data.values().to_vec();
            for row in values.chunks_mut(d.max(1)) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - t.mean[offset + j]) / t.scale[offset + j];
                }
            }
            Dataset::new(data.len(), d, values)
        };
        let split = |offset: usize, width: usize| -> Result<Dataset> {
            let pts = &base.pivot_points;
            let values = pts
                .rows()
                .flat_map(|r| r[offset..offset + width].iter().copied())
                .collect();
            Dataset::new(pts.len(), width, values)
        };
        let (piv_x, piv_y) = (split(0, dx)?, split(dx, self.dim_y())?);
        let grid = to_model(&self.y_grid, dx)?;
        let mut ky = cross_kernel_matrix(&base.kernel, &grid, &piv_y)?;
        for (mut col, b) in ky.column_iter_mut().zip(base.beta.iter()) {
            col *= *b;
        }
        let queries = to_model(queries, 0)?;
        let blocks: Vec<usize> = (0..queries.len()).step_by(BATCH_BLOCK).collect();
        let out: Vec<Vec<ConditionalWeights>> = blocks
            .par_iter()
            .map(|&start| {
                let idx: Vec<usize> = (start..(start + BATCH_BLOCK).min(queries.len())).collect();
                let kx = cross_kernel_matrix(&base.kernel, &queries.select_rows(&idx), &piv_x)?;
                let h = kx * ky.transpose();
                Ok(h.row_iter()
                    .map(|r| {
                        let raw: Vec<f64> = r.iter().map(|v| prior + v).collect();
                        normalize_positive(&raw)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let out: Vec<ConditionalWeights> = out.into_iter().flatten().collect();
        if out.iter().any(|w| w.degenerate) {
            log::warn!("all conditional ratios clipped to zero for some queries; using uniform weights there");
        }
        Ok(out)
    }

    /// Batch form of [`ConditionalModel::conditional_moments`].
    pub fn conditional_moments_batch(&self, queries: &Dataset) -> Result<Vec<ConditionalMoments>> {
        Ok(self
            .conditional_weights_batch(queries)?
            .into_iter()
            .map(|w| {
                let (mean, covariance) = weighted_moments(&w.weights, &self.y_grid);
                ConditionalMoments {
                    mean,
                    covariance,
                    degenerate: w.degenerate,
                }
            })
            .collect())
    }
}

/// Queries per block in batch evaluation.
const BATCH_BLOCK: usize = 128;

pub(crate) fn weighted_sum(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Weighted mean and covariance `Σ w_i (y_i − μ)(y_i − μ)ᵀ` of grid rows.
pub fn weighted_moments(w: &[f64], grid: &Dataset) -> (Vec<f64>, DMatrix<f64>) {
    let d = grid.dim();
    let mut mean = vec![0.0; d];
    for (wi, y) in w.iter().zip(grid.rows()) {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += wi * v;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (wi, y) in w.iter().zip(grid.rows()) {
        for a in 0..d {
            let da = y[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += wi * da * (y[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}
