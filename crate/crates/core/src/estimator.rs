//! Density-ratio estimation.
//!
//! The model is `g(z) = p_star(z) + h(z)` with `h` in the RKHS of the kernel.
//! Given samples `z_P` of `P` and `z_Q` of `Q` (both of size `n`), the
//! regularized estimate solves
//!
//! ```text
//! minimize  -2 ⟨S_Q* 1 - S_P* p, h⟩ + ⟨(S_P* S_P + nλ) h, h⟩
//! ```
//!
//! [`fit`] restricts the problem to the span of the pivot kernel functions
//! of a pivoted Cholesky decomposition of the stacked `2n x 2n` kernel
//! matrix; [`fit_full`] solves it over the span of all `2n` sample kernel
//! functions and is only meant for checking the low-rank path on small
//! problems.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{KdmError, Result};
use crate::kernels::{cross_kernel_matrix, kernel_sup, KernelSpec, KernelSup};
use crate::lowrank::{pivoted_cholesky, row_major, CholeskyFactors, CholeskyOptions, KernelOracle, PivotStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Zero,
    One,
    Custom,
}

impl std::str::FromStr for PriorKind {
    type Err = KdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "0" => Ok(PriorKind::Zero),
            "one" | "1" => Ok(PriorKind::One),
            "custom" => Ok(PriorKind::Custom),
            other => Err(KdmError::invalid(format!("unknown prior {other:?}"))),
        }
    }
}

pub type PriorFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Prior density ratio `p_star` with its sup bound `pi_inf`.
#[derive(Clone)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub pi_inf: f64,
    evaluator: Option<PriorFn>,
}

impl std::fmt::Debug for PriorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PriorSpec")
            .field("kind", &self.kind)
            .field("pi_inf", &self.pi_inf)
            .field("attached", &self.evaluator.is_some())
            .finish()
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::one()
    }
}

impl PriorSpec {
    pub fn zero() -> Self {
        PriorSpec {
            kind: PriorKind::Zero,
            pi_inf: 0.0,
            evaluator: None,
        }
    }

    pub fn one() -> Self {
        PriorSpec {
            kind: PriorKind::One,
            pi_inf: 1.0,
            evaluator: None,
        }
    }

    /// A user-supplied prior. `pi_inf` must bound `|f|` wherever it is
    /// evaluated; violations are logged, not rejected.
    pub fn custom<F>(f: F, pi_inf: f64) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        PriorSpec {
            kind: PriorKind::Custom,
            pi_inf,
            evaluator: Some(Arc::new(f)),
        }
    }

    pub fn from_kind(kind: PriorKind) -> Result<Self> {
        match kind {
            PriorKind::Zero => Ok(PriorSpec::zero()),
            PriorKind::One => Ok(PriorSpec::one()),
            PriorKind::Custom => Err(KdmError::DetachedPrior),
        }
    }

    pub fn is_attached(&self) -> bool {
        self.kind != PriorKind::Custom || self.evaluator.is_some()
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        match self.kind {
            PriorKind::Zero => Ok(0.0),
            PriorKind::One => Ok(1.0),
            PriorKind::Custom => {
                let f = self.evaluator.as_ref().ok_or(KdmError::DetachedPrior)?;
                let v = f(z);
                if v.abs() > self.pi_inf {
                    log::warn!("prior value {v} exceeds declared bound pi_inf = {}", self.pi_inf);
                }
                Ok(v)
            }
        }
    }

    fn eval_rows(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.rows().map(|z| self.eval(z)).collect()
    }
}

/// Decomposition tolerance, either absolute or relative to `trace(K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Tolerance {
    Absolute(f64),
    Relative(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(DEFAULT_EPSILON_REL)
    }
}

pub const DEFAULT_EPSILON_REL: f64 = 1e-6;

impl Tolerance {
    pub fn absolute(self, trace: f64) -> Result<f64> {
        let eps = match self {
            Tolerance::Absolute(e) => e,
            Tolerance::Relative(r) => r * trace,
        };
        if eps >= 0.0 && eps.is_finite() {
            Ok(eps)
        } else {
            Err(KdmError::invalid(format!("invalid tolerance {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitOptions {
    pub tolerance: Tolerance,
    pub strategy: PivotStrategy,
    pub max_rank: Option<usize>,
}

/// A fitted low-rank density-ratio model.
#[derive(Debug, Clone)]
pub struct KdmModel {
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub prior: PriorSpec,
    /// `m x d` pivot points.
    pub pivot_points: Dataset,
    /// Pivot indices into the stacked sample `(z_P; z_Q)`.
    pub pivots: Vec<usize>,
    /// Coefficients of `h` on `k(·, z_Π)`.
    pub beta: DVector<f64>,
    /// Orthonormal-basis coordinates of `h`, `beta = R w`.
    pub w: DVector<f64>,
    pub l_p: DMatrix<f64>,
    pub l_q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Prior evaluated at the P-sample.
    pub prior_values: DVector<f64>,
    /// Sample size per measure.
    pub n: usize,
    pub kappa_inf: f64,
    /// `kappa_inf` is a maximum over training data, not a true bound.
    pub kappa_empirical: bool,
    pub epsilon: f64,
    pub residual_trace: f64,
    pub rank_capped: bool,
    pub standardization: Option<Standardization>,
}

/// Fits the low-rank estimator.
pub fn fit(
    sample_p: &Dataset,
    sample_q: &Dataset,
    kernel: &KernelSpec,
    lambda: f64,
    prior: &PriorSpec,
    options: &FitOptions,
) -> Result<KdmModel> {
    check_lambda(lambda)?;
    Factorized::new(sample_p, sample_q, kernel, prior, options)?.solve(lambda)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(KdmError::invalid(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Everything in a fit that does not depend on `λ`.
struct Factorized<'a> {
    kernel: KernelSpec,
    prior: &'a PriorSpec,
    stacked: Dataset,
    factors: CholeskyFactors,
    l_p: DMatrix<f64>,
    l_q: DMatrix<f64>,
    prior_values: DVector<f64>,
    n: usize,
    kappa: KernelSup,
    epsilon: f64,
    trace: f64,
    standardization: Option<Standardization>,
}

impl<'a> Factorized<'a> {
    fn new(
        sample_p: &Dataset,
        sample_q: &Dataset,
        kernel: &KernelSpec,
        prior: &'a PriorSpec,
        options: &FitOptions,
    ) -> Result<Self> {
        kernel.validate()?;
        if sample_p.len() != sample_q.len() {
            return Err(KdmError::invalid(format!(
                "sample sizes differ: {} vs {}",
                sample_p.len(),
                sample_q.len()
            )));
        }
        if sample_p.standardization != sample_q.standardization {
            return Err(KdmError::invalid("P and Q samples carry different standardizations"));
        }
        let n = sample_p.len();
        let stacked = sample_p.vstack(sample_q)?;
        let oracle = KernelOracle::new(*kernel, &stacked);
        let kappa = kernel_sup(kernel, Some(&stacked))?;
        if kappa.empirical {
            log::warn!("kernel is unbounded; using empirical kappa = {}", kappa.value);
        }
        let trace: f64 = stacked.rows().map(|z| kernel.eval_unchecked(z, z)).sum();
        let epsilon = options.tolerance.absolute(trace)?;
        let factors = pivoted_cholesky(
            &oracle,
            epsilon,
            &options.strategy,
            CholeskyOptions {
                max_rank: options.max_rank,
            },
        )?;
        Ok(Factorized {
            kernel: *kernel,
            prior,
            l_p: factors.l_rows(0, n),
            l_q: factors.l_rows(n, n),
            prior_values: DVector::from_vec(prior.eval_rows(sample_p)?),
            stacked,
            factors,
            n,
            kappa,
            epsilon,
            trace,
            standardization: sample_p.standardization.clone(),
        })
    }

    fn solve(&self, lambda: f64) -> Result<KdmModel> {
        let n = self.n;
        let rhs = self.l_q.row_sum().transpose() - self.l_p.transpose() * &self.prior_values;
        let w = solve_ridge(&self.l_p, n as f64 * lambda, &rhs)?;
        let beta = &self.factors.r * &w;
        let f = &self.factors;
        Ok(KdmModel {
            kernel: self.kernel,
            lambda,
            prior: self.prior.clone(),
            pivot_points: self.stacked.select_rows(&f.pivots),
            pivots: f.pivots.clone(),
            beta,
            w,
            l_p: self.l_p.clone(),
            l_q: self.l_q.clone(),
            r: f.r.clone(),
            prior_values: self.prior_values.clone(),
            n,
            kappa_inf: self.kappa.value,
            kappa_empirical: self.kappa.empirical,
            epsilon: self.epsilon,
            residual_trace: f.residual_trace,
            rank_capped: f.rank_capped || f.rank() == 0 && self.trace > self.epsilon,
            standardization: self.standardization.clone(),
        })
    }
}

/// Solves `(AᵀA + shift I) x = rhs` by Cholesky.
fn solve_ridge(a: &DMatrix<f64>, shift: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let m = a.ncols();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut sys = a.transpose() * a;
    for i in 0..m {
        sys[(i, i)] += shift;
    }
    let chol = sys
        .cholesky()
        .ok_or_else(|| KdmError::Solve("ridge system is not positive definite".into()))?;
    Ok(chol.solve(rhs))
}

impl KdmModel {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn dim(&self) -> usize {
        self.pivot_points.dim()
    }

    /// Maps a point given in input coordinates to model coordinates.
    fn prepare<'z>(&self, z: &'z [f64]) -> Result<Cow<'z, [f64]>> {
        if z.len() != self.dim() {
            return Err(KdmError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(match &self.standardization {
            Some(t) => Cow::Owned(t.apply(z)),
            None => Cow::Borrowed(z),
        })
    }

    /// Brings a dataset to model coordinates unless it already is.
    fn prepare_set<'d>(&self, data: &'d Dataset) -> Result<Cow<'d, Dataset>> {
        if data.dim() != self.dim() {
            return Err(KdmError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        match (&self.standardization, &data.standardization) {
            (None, None) => Ok(Cow::Borrowed(data)),
            (Some(a), Some(b)) if a == b => Ok(Cow::Borrowed(data)),
            (Some(a), None) => Ok(Cow::Owned(data.standardized(a)?)),
            _ => Err(KdmError::invalid("dataset standardization does not match the model")),
        }
    }

    fn h_model_coords(&self, z: &[f64]) -> f64 {
        self.pivot_points
            .rows()
            .zip(self.beta.iter())
            .map(|(p, b)| b * self.kernel.eval_unchecked(z, p))
            .sum()
    }

    /// `h(z) = Σ_j beta_j k(z, z_{π_j})`.
    pub fn eval_h(&self, z: &[f64]) -> Result<f64> {
        let z = self.prepare(z)?;
        Ok(self.h_model_coords(&z))
    }

    pub fn eval_h_batch(&self, data: &Dataset) -> Result<Vec<f64>> {
        let data = self.prepare_set(data)?;
        Ok((0..data.len())
            .into_par_iter()
            .map(|i| self.h_model_coords(data.row(i)))
            .collect())
    }

    /// `p_star(z) + h(z)`, optionally clipped at zero.
    pub fn eval_density_ratio(&self, z: &[f64], clip: bool) -> Result<f64> {
        let z = self.prepare(z)?;
        let g = self.prior.eval(&z)? + self.h_model_coords(&z);
        Ok(if clip { g.max(0.0) } else { g })
    }

    pub fn eval_density_ratio_batch(&self, data: &Dataset, clip: bool) -> Result<Vec<f64>> {
        let data = self.prepare_set(data)?;
        let h: Vec<f64> = (0..data.len())
            .into_par_iter()
            .map(|i| self.h_model_coords(data.row(i)))
            .collect();
        data.rows()
            .zip(h)
            .map(|(z, h)| {
                let g = self.prior.eval(z)? + h;
                Ok(if clip { g.max(0.0) } else { g })
            })
            .collect()
    }

    /// `‖h‖_H = sqrt(betaᵀ K[Π, Π] beta)`.
    pub fn h_norm(&self) -> f64 {
        let m = self.rank();
        let mut q = 0.0;
        for i in 0..m {
            let zi = self.pivot_points.row(i);
            for j in 0..m {
                q += self.beta[i] * self.beta[j] * self.kernel.eval_unchecked(zi, self.pivot_points.row(j));
            }
        }
        q.max(0.0).sqrt()
    }

    /// `‖h‖_H` as the Euclidean norm of the orthonormal-basis coordinates.
    pub fn h_norm_coordinates(&self) -> f64 {
        self.w.norm()
    }

    /// `‖(L_PᵀL_P + nλ)⁻¹(L_Qᵀ1 − L_Pᵀp)‖₂`, identical to [`Self::h_norm_coordinates`].
    pub fn solution_norm(&self) -> f64 {
        self.w.norm()
    }

    /// Attaches an evaluator to a model whose custom prior was lost in
    /// serialization.
    pub fn attach_prior(&mut self, prior: PriorSpec) -> Result<()> {
        if prior.kind != self.prior.kind {
            return Err(KdmError::invalid("prior kind differs from the fitted one"));
        }
        self.prior = prior;
        Ok(())
    }
}

/// Unregularized objective on held-out samples, each sum scaled by its
/// sample size:
///
/// `-2 (mean_Q h(z̄_Q) - mean_P p(z̄_P) h(z̄_P)) + mean_P h(z̄_P)²`.
pub fn validation_loss(model: &KdmModel, val_p: &Dataset, val_q: &Dataset) -> Result<f64> {
    if val_p.is_empty() || val_q.is_empty() {
        return Err(KdmError::invalid("validation sets must be nonempty"));
    }
    let vp = model.prepare_set(val_p)?;
    let vq = model.prepare_set(val_q)?;
    let hp = model.eval_h_batch(&vp)?;
    let hq = model.eval_h_batch(&vq)?;
    let pp = model.prior.eval_rows(&vp)?;
    Ok(loss_from_values(&hp, &hq, &pp))
}

/// The validation loss from `h` on both validation sets and the prior on
/// the P-set.
fn loss_from_values(hp: &[f64], hq: &[f64], pp: &[f64]) -> f64 {
    let np = hp.len() as f64;
    let nq = hq.len() as f64;
    let mean_q: f64 = hq.iter().sum::<f64>() / nq;
    let cross_p: f64 = hp.iter().zip(pp).map(|(h, p)| h * p).sum::<f64>() / np;
    let quad_p: f64 = hp.iter().map(|h| h * h).sum::<f64>() / np;
    -2.0 * (mean_q - cross_p) + quad_p
}

/// Mean validation loss per grid candidate and the selected candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best_index: usize,
    pub best_kernel: KernelSpec,
    pub best_lambda: f64,
    pub mean_losses: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

/// Equal-size contiguous folds of a seeded permutation of `0..n`.
fn fold_partition(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    (0..k).map(|f| idx[f * n / k..(f + 1) * n / k].to_vec()).collect()
}

/// k-fold cross-validation over `(kernel, lambda)` candidates. Fold `i` of the
/// P-sample is paired with fold `i` of the Q-sample. Ties go to the earlier
/// grid entry.
pub fn cross_validate(
    sample_p: &Dataset,
    sample_q: &Dataset,
    grid: &[(KernelSpec, f64)],
    folds: usize,
    prior: &PriorSpec,
    options: &FitOptions,
    seed: u64,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(KdmError::invalid("cross-validation grid is empty"));
    }
    if folds < 2 {
        return Err(KdmError::invalid("need at least two folds"));
    }
    for (k, lambda) in grid {
        k.validate()?;
        if !(*lambda > 0.0) {
            return Err(KdmError::invalid(format!("lambda must be positive, got {lambda}")));
        }
    }
    let n = sample_p.len().min(sample_q.len());
    if sample_p.len() != sample_q.len() {
        log::warn!(
            "truncating samples to common size {n} (P has {}, Q has {})",
            sample_p.len(),
            sample_q.len()
        );
    }
    if n / folds < 2 {
        return Err(KdmError::invalid(format!(
            "fold size {} is below 2 ({} points, {} folds)",
            n / folds,
            n,
            folds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts_p = fold_partition(n, folds, &mut rng);
    let parts_q = fold_partition(n, folds, &mut rng);

    let splits: Vec<(Dataset, Dataset, Dataset, Dataset)> = (0..folds)
        .map(|f| {
            let train = |parts: &[Vec<usize>]| -> Vec<usize> {
                parts
                    .iter()
                    .enumerate()
                    .filter(|&(g, _)| g != f)
                    .flat_map(|(_, p)| p.iter().copied())
                    .collect()
            };
            let (tp, tq) = (train(&parts_p), train(&parts_q));
            let m = tp.len().min(tq.len());
            (
                sample_p.select_rows(&tp[..m]),
                sample_q.select_rows(&tq[..m]),
                sample_p.select_rows(&parts_p[f]),
                sample_q.select_rows(&parts_q[f]),
            )
        })
        .collect();

    // One factorization per (kernel, fold), shared by every λ on that kernel.
    let mut kernels: Vec<KernelSpec> = Vec::new();
    for (k, _) in grid {
        if !kernels.contains(k) {
            kernels.push(*k);
        }
    }
    let jobs: Vec<(usize, usize)> = (0..kernels.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let per_job: Vec<Vec<(usize, f64)>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let candidates: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].0 == kernels[c]).collect();
            let (tp, tq, vp, vq) = &splits[f];
            match fold_losses(tp, tq, vp, vq, &kernels[c], grid, &candidates, prior, options) {
                Ok(losses) => losses,
                Err(e) => {
                    log::warn!("kernel {c} fold {f} failed: {e}");
                    candidates.iter().map(|&i| (i, f64::INFINITY)).collect()
                }
            }
        })
        .collect();
    let mut losses = vec![f64::INFINITY; grid.len() * folds];
    for (&(_, f), job) in jobs.iter().zip(&per_job) {
        for &(i, loss) in job {
            losses[i * folds + f] = if loss.is_finite() { loss } else { f64::INFINITY };
        }
    }

    let mean_losses: Vec<f64> = losses
        .chunks(folds)
        .map(|c| c.iter().sum::<f64>() / folds as f64)
        .collect();
    let mut best_index = 0;
    for (i, &l) in mean_losses.iter().enumerate() {
        if l < mean_losses[best_index] {
            best_index = i;
        }
    }
    if !mean_losses[best_index].is_finite() {
        return Err(KdmError::Solve("every cross-validation candidate failed".into()));
    }
    Ok(CvReport {
        best_index,
        best_kernel: grid[best_index].0,
        best_lambda: grid[best_index].1,
        mean_losses,
        folds,
        seed,
    })
}

/// Validation losses of the grid entries `candidates` (all on `kernel`) for
/// one fold, reusing the factorization and the validation kernel matrices.
#[allow(clippy::too_many_arguments)]
fn fold_losses(
    train_p: &Dataset,
    train_q: &Dataset,
    val_p: &Dataset,
    val_q: &Dataset,
    kernel: &KernelSpec,
    grid: &[(KernelSpec, f64)],
    candidates: &[usize],
    prior: &PriorSpec,
    options: &FitOptions,
) -> Result<Vec<(usize, f64)>> {
    if val_p.is_empty() || val_q.is_empty() {
        return Err(KdmError::invalid("validation sets must be nonempty"));
    }
    let base = Factorized::new(train_p, train_q, kernel, prior, options)?;
    let mut shared: Option<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> = None;
    let mut out = Vec::with_capacity(candidates.len());
    for &i in candidates {
        let loss = base.solve(grid[i].1).and_then(|model| {
            if shared.is_none() {
                let vp = model.prepare_set(val_p)?;
                let vq = model.prepare_set(val_q)?;
                let kp = cross_kernel_matrix(kernel, &vp, &model.pivot_points)?;
                let kq = cross_kernel_matrix(kernel, &vq, &model.pivot_points)?;
                shared = Some((kp, kq, prior.eval_rows(&vp)?));
            }
            let (kp, kq, pp) = shared.as_ref().expect("validation matrices");
            let hp = kp * &model.beta;
            let hq = kq * &model.beta;
            Ok(loss_from_values(hp.as_slice(), hq.as_slice(), pp))
        });
        out.push((i, loss.unwrap_or(f64::INFINITY)));
    }
    Ok(out)
}

/// Largest stacked sample size [`fit_full`] will materialize.
pub const FULL_RANK_CAP: usize = 4000;

/// The estimator over all `2n` sample kernel functions.
#[derive(Debug, Clone)]
pub struct FullRankModel {
    pub kernel: KernelSpec,
    pub lambda: f64,
    /// Stacked `(z_P; z_Q)`.
    pub points: Dataset,
    pub beta: DVector<f64>,
    pub n: usize,
}

/// Solves the sample problem exactly over `span{k(·, z_i)}`.
///
/// Writing `h = Σ beta_i k(·, z_i)`, stationarity is implied by
/// `(D K + nλ I) beta = u` with `D` the indicator of the P-rows and
/// `u = (-p; 1)`. The Q block gives `beta_Q = 1/(nλ)` directly and the
/// P block is the SPD system `(K_PP + nλ) beta_P = -p - K_PQ beta_Q`.
pub fn fit_full(
    sample_p: &Dataset,
    sample_q: &Dataset,
    kernel: &KernelSpec,
    lambda: f64,
    prior: &PriorSpec,
) -> Result<FullRankModel> {
    kernel.validate()?;
    if !(lambda > 0.0) {
        return Err(KdmError::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if sample_p.len() != sample_q.len() {
        return Err(KdmError::invalid("sample sizes differ"));
    }
    let n = sample_p.len();
    if 2 * n > FULL_RANK_CAP {
        return Err(KdmError::MemoryCap {
            requested: 2 * n,
            cap: FULL_RANK_CAP,
        });
    }
    let shift = n as f64 * lambda;
    let mut k_pp = cross_kernel_matrix(kernel, sample_p, sample_p)?;
    let k_pq = cross_kernel_matrix(kernel, sample_p, sample_q)?;
    let p = DVector::from_vec(prior.eval_rows(sample_p)?);
    let beta_q = DVector::from_element(n, 1.0 / shift);
    let rhs = -(&p) - &k_pq * &beta_q;
    for i in 0..n {
        k_pp[(i, i)] += shift;
    }
    let beta_p = k_pp
        .cholesky()
        .ok_or_else(|| KdmError::Solve("full-rank system is not positive definite".into()))?
        .solve(&rhs);
    let mut beta = DVector::zeros(2 * n);
    beta.rows_mut(0, n).copy_from(&beta_p);
    beta.rows_mut(n, n).copy_from(&beta_q);
    Ok(FullRankModel {
        kernel: *kernel,
        lambda,
        points: sample_p.vstack(sample_q)?,
        beta,
        n,
    })
}

impl FullRankModel {
    pub fn eval_h(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.points.dim() {
            return Err(KdmError::DimensionMismatch {
                expected: self.points.dim(),
                got: z.len(),
            });
        }
        Ok(self
            .points
            .rows()
            .zip(self.beta.iter())
            .map(|(p, b)| b * self.kernel.eval_unchecked(z, p))
            .sum())
    }

    /// `sqrt(betaᵀ K beta)`.
    pub fn h_norm(&self) -> Result<f64> {
        let k = cross_kernel_matrix(&self.kernel, &self.points, &self.points)?;
        Ok(self.beta.dot(&(&k * &self.beta)).max(0.0).sqrt())
    }

    /// `‖h_full − h_lowrank‖_H` from the Gram form over the stacked sample.
    /// The low-rank model must have been fitted on the same samples.
    pub fn rkhs_gap(&self, lowrank: &KdmModel) -> Result<f64> {
        if lowrank.n != self.n || lowrank.dim() != self.points.dim() {
            return Err(KdmError::invalid("models were fitted on different samples"));
        }
        let mut diff = self.beta.clone();
        for (j, &pi) in lowrank.pivots.iter().enumerate() {
            diff[pi] -= lowrank.beta[j];
        }
        let k = cross_kernel_matrix(&self.kernel, &self.points, &self.points)?;
        Ok(diff.dot(&(&k * &diff)).max(0.0).sqrt())
    }
}

/// Serialized form of a [`KdmModel`]. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub version: String,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub prior: PriorKind,
    pub pi_inf: f64,
    pub n: usize,
    pub dim: usize,
    pub rank: usize,
    pub pivots: Vec<usize>,
    pub pivot_points: Vec<f64>,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    pub l_p: Vec<f64>,
    pub l_q: Vec<f64>,
    pub r: Vec<f64>,
    pub prior_values: Vec<f64>,
    pub kappa_inf: f64,
    pub kappa_empirical: bool,
    pub epsilon: f64,
    pub residual_trace: f64,
    pub rank_capped: bool,
    pub standardization: Option<Standardization>,
}

pub const MODEL_FORMAT: &str = "kdm-model";

impl From<&KdmModel> for ModelBundle {
    fn from(m: &KdmModel) -> Self {
        ModelBundle {
            format: MODEL_FORMAT.into(),
            version: crate::VERSION.into(),
            kernel: m.kernel,
            lambda: m.lambda,
            prior: m.prior.kind,
            pi_inf: m.prior.pi_inf,
            n: m.n,
            dim: m.dim(),
            rank: m.rank(),
            pivots: m.pivots.clone(),
            pivot_points: m.pivot_points.values().to_vec(),
            beta: m.beta.as_slice().to_vec(),
            w: m.w.as_slice().to_vec(),
            l_p: row_major(&m.l_p),
            l_q: row_major(&m.l_q),
            r: row_major(&m.r),
            prior_values: m.prior_values.as_slice().to_vec(),
            kappa_inf: m.kappa_inf,
            kappa_empirical: m.kappa_empirical,
            epsilon: m.epsilon,
            residual_trace: m.residual_trace,
            rank_capped: m.rank_capped,
            standardization: m.standardization.clone(),
        }
    }
}

impl ModelBundle {
    /// Rebuilds the model. A custom prior comes back detached and must be
    /// re-supplied with [`KdmModel::attach_prior`] before evaluation.
    pub fn into_model(self) -> Result<KdmModel> {
        if self.format != MODEL_FORMAT {
            return Err(KdmError::invalid(format!("not a model bundle: {:?}", self.format)));
        }
        let (n, m, d) = (self.n, self.rank, self.dim);
        let shapes_ok = self.pivots.len() == m
            && self.beta.len() == m
            && self.w.len() == m
            && self.l_p.len() == n * m
            && self.l_q.len() == n * m
            && self.r.len() == m * m
            && self.prior_values.len() == n
            && self.pivot_points.len() == m * d;
        if !shapes_ok {
            return Err(KdmError::invalid("inconsistent model bundle shapes"));
        }
        let pivot_points = if m > 0 {
            Dataset::new(m, d, self.pivot_points)?
        } else {
            // an empty expansion still needs to remember its dimension
            Dataset::new(1, d, vec![0.0; d])?.select_rows(&[])
        };
        let prior = match self.prior {
            PriorKind::Custom => PriorSpec {
                kind: PriorKind::Custom,
                pi_inf: self.pi_inf,
                evaluator: None,
            },
            k => PriorSpec::from_kind(k)?,
        };
        Ok(KdmModel {
            kernel: self.kernel,
            lambda: self.lambda,
            prior,
            pivot_points,
            pivots: self.pivots,
            beta: DVector::from_vec(self.beta),
            w: DVector::from_vec(self.w),
            l_p: DMatrix::from_row_slice(n, m, &self.l_p),
            l_q: DMatrix::from_row_slice(n, m, &self.l_q),
            r: DMatrix::from_row_slice(m, m, &self.r),
            prior_values: DVector::from_vec(self.prior_values),
            n,
            kappa_inf: self.kappa_inf,
            kappa_empirical: self.kappa_empirical,
            epsilon: self.epsilon,
            residual_trace: self.residual_trace,
            rank_capped: self.rank_capped,
            standardization: self.standardization,
        })
    }
}

impl KdmModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelBundle::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelBundle>(s)?.into_model()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        KdmModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(n: usize, d: usize, shift: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        Dataset::new(n, d, v).unwrap()
    }

    fn exact() -> FitOptions {
        FitOptions {
            tolerance: Tolerance::Absolute(0.0),
            ..Default::default()
        }
    }

    #[test]
    fn identical_samples_give_zero_coefficients() {
        let p = random_set(30, 2, 0.0, 1);
        let k = KernelSpec::gaussian(0.5);
        let m = fit(&p, &p, &k, 1e-3, &PriorSpec::one(), &FitOptions::default()).unwrap();
        // duplicated rows factor identically up to rounding
        assert!(m.w.amax() < 1e-12, "w = {}", m.w.amax());
        assert!(m.h_norm() < 1e-10, "beta = {}, norm = {}", m.beta.amax(), m.h_norm());
        let full = fit_full(&p, &p, &k, 1e-3, &PriorSpec::one()).unwrap();
        // Q block is 1/(nλ), P block cancels it
        assert!(full.h_norm().unwrap() < 1e-8 * full.beta.amax());
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let p = random_set(40, 1, 0.0, 2);
        let q = random_set(40, 1, 0.5, 3);
        let m = fit(
            &p,
            &q,
            &KernelSpec::gaussian(1.0),
            1e12,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        let rhs = m.l_q.row_sum().transpose() - m.l_p.transpose() * &m.prior_values;
        assert!(m.beta.norm() <= 1e-6 * rhs.norm());
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = random_set(5, 1, 0.0, 1);
        let q = random_set(6, 1, 0.0, 2);
        let k = KernelSpec::gaussian(1.0);
        assert!(fit(&p, &q, &k, 1e-3, &PriorSpec::one(), &Default::default()).is_err());
        assert!(fit(&p, &p, &k, 0.0, &PriorSpec::one(), &Default::default()).is_err());
        let wide = random_set(5, 2, 0.0, 1);
        assert!(fit(&p, &wide, &k, 1e-3, &PriorSpec::one(), &Default::default()).is_err());
    }

    #[test]
    fn eval_h_single_term() {
        let mut m = fit(
            &Dataset::from_column(&[0.0]).unwrap(),
            &Dataset::from_column(&[0.0]).unwrap(),
            &KernelSpec::gaussian(0.5),
            1.0,
            &PriorSpec::one(),
            &exact(),
        )
        .unwrap();
        assert_eq!(m.rank(), 1);
        m.beta = DVector::from_vec(vec![2.0]);
        let v = m.eval_h(&[1.0]).unwrap();
        assert!((v - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(m.h_norm(), 2.0);
        assert!(m.eval_h(&[1.0, 2.0]).is_err());
        // clipping
        m.beta = DVector::from_vec(vec![-1.2]);
        assert!((m.eval_density_ratio(&[0.0], false).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(m.eval_density_ratio(&[0.0], true).unwrap(), 0.0);
    }

    #[test]
    fn zero_beta_means_prior() {
        let p = random_set(10, 1, 0.0, 7);
        let m = fit(
            &p,
            &p,
            &KernelSpec::gaussian(1.0),
            0.1,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        for z in [-3.0, 0.0, 2.5] {
            assert!(m.eval_h(&[z]).unwrap().abs() < 1e-12);
            assert!((m.eval_density_ratio(&[z], false).unwrap() - 1.0).abs() < 1e-12);
        }
        let v = random_set(8, 1, 0.3, 8);
        assert!(validation_loss(&m, &v, &v).unwrap().abs() < 1e-12);
    }

    #[test]
    fn pivot_values_equal_gram_times_beta() {
        let p = random_set(25, 2, 0.0, 4);
        let q = random_set(25, 2, 0.3, 5);
        let k = KernelSpec::gaussian(0.7);
        let m = fit(&p, &q, &k, 1e-2, &PriorSpec::one(), &Default::default()).unwrap();
        let gram = cross_kernel_matrix(&k, &m.pivot_points, &m.pivot_points).unwrap();
        let expect = gram * &m.beta;
        let got = m.eval_h_batch(&m.pivot_points).unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_paths_agree() {
        for seed in 0..5 {
            let p = random_set(40, 2, 0.0, seed);
            let q = random_set(40, 2, 0.4, seed + 100);
            let m = fit(
                &p,
                &q,
                &KernelSpec::laplace(1.5),
                1e-2,
                &PriorSpec::one(),
                &Default::default(),
            )
            .unwrap();
            let a = m.h_norm();
            let b = m.h_norm_coordinates();
            assert!((a - b).abs() <= 1e-8 * b.max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn lowrank_matches_full_rank_at_zero_tolerance() {
        let p = random_set(30, 2, 0.0, 9);
        let q = random_set(30, 2, 0.5, 10);
        let k = KernelSpec::laplace(1.0);
        let lr = fit(&p, &q, &k, 1e-2, &PriorSpec::one(), &exact()).unwrap();
        let full = fit_full(&p, &q, &k, 1e-2, &PriorSpec::one()).unwrap();
        let probe = random_set(50, 2, 0.2, 11);
        let vals: Vec<f64> = probe.rows().map(|z| full.eval_h(z).unwrap()).collect();
        let scale = 1.0 + vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (z, f) in probe.rows().zip(&vals) {
            assert!((lr.eval_h(z).unwrap() - f).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn ridge_system_is_spd() {
        let p = random_set(30, 1, 0.0, 12);
        let q = random_set(30, 1, 0.2, 13);
        let lambda = 1e-3;
        let m = fit(
            &p,
            &q,
            &KernelSpec::gaussian(0.3),
            lambda,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        let mut sys = m.l_p.transpose() * &m.l_p;
        let shift = m.n as f64 * lambda;
        for i in 0..sys.nrows() {
            sys[(i, i)] += shift;
        }
        assert!(sys.symmetric_eigenvalues().min() >= shift * (1.0 - 1e-10));
    }

    #[test]
    fn norm_decreases_with_lambda() {
        let p = random_set(50, 1, 0.0, 14);
        let q = random_set(50, 1, 0.6, 15);
        let k = KernelSpec::gaussian(0.5);
        let norms: Vec<f64> = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]
            .iter()
            .map(|&l| {
                fit(&p, &q, &k, l, &PriorSpec::one(), &Default::default())
                    .unwrap()
                    .h_norm_coordinates()
            })
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{norms:?}");
        }
    }

    #[test]
    fn duplicated_validation_points_leave_loss_unchanged() {
        let p = random_set(30, 1, 0.0, 16);
        let q = random_set(30, 1, 0.6, 17);
        let m = fit(
            &p,
            &q,
            &KernelSpec::gaussian(0.5),
            1e-2,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        let vp = random_set(10, 1, 0.0, 18);
        let vq = random_set(12, 1, 0.6, 19);
        let l1 = validation_loss(&m, &vp, &vq).unwrap();
        let l2 = validation_loss(&m, &vp.vstack(&vp).unwrap(), &vq.vstack(&vq).unwrap()).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let empty = vp.select_rows(&[]);
        assert!(validation_loss(&m, &empty, &vq).is_err());
    }

    #[test]
    fn cross_validation_contracts() {
        let p = random_set(40, 1, 0.0, 20);
        let q = random_set(40, 1, 0.7, 21);
        let one = [(KernelSpec::gaussian(0.5), 1e-2)];
        let r = cross_validate(&p, &q, &one, 4, &PriorSpec::one(), &Default::default(), 3).unwrap();
        assert_eq!(r.best_index, 0);
        let grid: Vec<_> = [0.1, 0.5, 2.0]
            .iter()
            .flat_map(|&rho| [1e-3, 1e-1].map(|l| (KernelSpec::gaussian(rho), l)))
            .collect();
        let a = cross_validate(&p, &q, &grid, 4, &PriorSpec::one(), &Default::default(), 9).unwrap();
        let b = cross_validate(&p, &q, &grid, 4, &PriorSpec::one(), &Default::default(), 9).unwrap();
        assert_eq!(a, b);
        let min = a.mean_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.mean_losses[a.best_index], min);
        assert!(cross_validate(&p, &q, &grid, 1, &PriorSpec::one(), &Default::default(), 9).is_err());
        assert!(cross_validate(&p, &q, &grid, 30, &PriorSpec::one(), &Default::default(), 9).is_err());
        assert!(cross_validate(&p, &q, &[], 4, &PriorSpec::one(), &Default::default(), 9).is_err());
    }

    #[test]
    fn shared_factorization_matches_independent_fits() {
        let p = random_set(45, 2, 0.0, 30);
        let q = random_set(45, 2, 0.5, 31);
        let grid: Vec<_> = [0.4, 1.5]
            .iter()
            .flat_map(|&rho| [1e-3, 1e-2, 1e-1].map(|l| (KernelSpec::laplace(rho), l)))
            .collect();
        let (folds, seed) = (3, 17);
        let prior = PriorSpec::one();
        let report = cross_validate(&p, &q, &grid, folds, &prior, &Default::default(), seed).unwrap();
        // replay the partition and score every candidate with its own fit
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts_p = fold_partition(45, folds, &mut rng);
        let parts_q = fold_partition(45, folds, &mut rng);
        for (i, (kernel, lambda)) in grid.iter().enumerate() {
            let mut total = 0.0;
            for f in 0..folds {
                let rest = |parts: &[Vec<usize>]| -> Vec<usize> {
                    (0..folds).filter(|&g| g != f).flat_map(|g| parts[g].clone()).collect()
                };
                let m = fit(
                    &p.select_rows(&rest(&parts_p)),
                    &q.select_rows(&rest(&parts_q)),
                    kernel,
                    *lambda,
                    &prior,
                    &Default::default(),
                )
                .unwrap();
                total += validation_loss(&m, &p.select_rows(&parts_p[f]), &q.select_rows(&parts_q[f])).unwrap();
            }
            let expected = total / folds as f64;
            assert!(
                (report.mean_losses[i] - expected).abs() <= 1e-10 * expected.abs().max(1.0),
                "candidate {i}: {} vs {expected}",
                report.mean_losses[i]
            );
        }
    }

    #[test]
    fn bundle_round_trip_preserves_predictions() {
        let p = random_set(20, 2, 0.0, 22);
        let q = random_set(20, 2, 0.4, 23);
        let m = fit(
            &p,
            &q,
            &KernelSpec::gaussian(0.8),
            1e-2,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        let back = KdmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.beta, m.beta);
        assert_eq!(back.l_p, m.l_p);
        assert_eq!(back.r, m.r);
        for z in p.rows() {
            assert_eq!(back.eval_h(z).unwrap(), m.eval_h(z).unwrap());
        }
    }

    #[test]
    fn custom_prior_detaches_on_load() {
        let p = random_set(10, 1, 0.0, 24);
        let q = random_set(10, 1, 0.4, 25);
        let prior = PriorSpec::custom(|z: &[f64]| 1.0 + 0.1 * z[0], 1.2);
        let m = fit(&p, &q, &KernelSpec::gaussian(0.8), 1e-2, &prior, &Default::default()).unwrap();
        let mut back = KdmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert!(matches!(
            back.eval_density_ratio(&[0.0], false),
            Err(KdmError::DetachedPrior)
        ));
        back.attach_prior(prior).unwrap();
        assert_eq!(
            back.eval_density_ratio(&[0.3], false).unwrap(),
            m.eval_density_ratio(&[0.3], false).unwrap()
        );
    }

    #[test]
    fn standardized_models_accept_raw_points() {
        let p = random_set(20, 1, 5.0, 26);
        let q = random_set(20, 1, 5.5, 27);
        let t = Standardization::fit(&[&p, &q]).unwrap();
        let (ps, qs) = (p.standardized(&t).unwrap(), q.standardized(&t).unwrap());
        let m = fit(
            &ps,
            &qs,
            &KernelSpec::gaussian(0.8),
            1e-2,
            &PriorSpec::one(),
            &Default::default(),
        )
        .unwrap();
        let raw = m.eval_h(p.row(3)).unwrap();
        let batch = m.eval_h_batch(&ps).unwrap();
        assert!((raw - batch[3]).abs() < 1e-14);
        let batch_raw = m.eval_h_batch(&p).unwrap();
        assert_eq!(batch_raw, batch);
    }
}
