//! Pivoted incomplete Cholesky decomposition with a biorthogonal factor.
//!
//! For a PSD matrix `K` of order `N` the decomposition returns a pivot list
//! `Π = (π_1, ..., π_m)`, an `N x m` factor `L` and an `m x m` factor `R`
//! with
//!
//! * `K[:, Π] R = L`
//! * `Rᵀ L[Π, :] = I`
//! * `R Rᵀ = K[Π, Π]⁻¹` and `L Lᵀ = K[:, Π] K[Π, Π]⁻¹ K[Π, :]`
//! * `K - L Lᵀ` is PSD with trace at most the tolerance.
//!
//! Only `m` columns of `K` and its diagonal are ever requested, through a
//! [`ColumnOracle`], so the cost is `O(m² N)` without materializing `K`.
//!
//! `R` is only ever nonzero in the rows belonging to pivots; it is upper
//! triangular when rows and columns are both taken in pivot order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{KdmError, Result};
use crate::kernels::KernelSpec;

/// Read-only access to columns and diagonal of a PSD matrix.
pub trait ColumnOracle: Sync {
    /// Order of the matrix.
    fn size(&self) -> usize;
    fn diagonal(&self) -> Vec<f64>;
    fn column(&self, j: usize) -> Vec<f64>;
}

/// Kernel matrix of a point set, evaluated lazily column by column.
pub struct KernelOracle<'a> {
    pub spec: KernelSpec,
    pub points: &'a Dataset,
}

impl<'a> KernelOracle<'a> {
    pub fn new(spec: KernelSpec, points: &'a Dataset) -> Self {
        KernelOracle { spec, points }
    }
}

impl ColumnOracle for KernelOracle<'_> {
    fn size(&self) -> usize {
        self.points.len()
    }

    fn diagonal(&self) -> Vec<f64> {
        self.points.rows().map(|z| self.spec.eval_unchecked(z, z)).collect()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        let zj = self.points.row(j);
        self.points.rows().map(|z| self.spec.eval_unchecked(z, zj)).collect()
    }
}

/// An explicitly stored matrix.
pub struct MatrixOracle<'a>(pub &'a DMatrix<f64>);

impl ColumnOracle for MatrixOracle<'_> {
    fn size(&self) -> usize {
        self.0.nrows()
    }

    fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum PivotStrategy {
    /// Largest residual diagonal.
    #[default]
    Greedy,
    /// Orthogonal matching pursuit towards the sample values `target` of a
    /// function, restricted to residual diagonals at or above the given
    /// quantile of the nonzero ones.
    Omp { target: Vec<f64>, quantile: f64 },
}

impl PivotStrategy {
    pub fn omp(target: Vec<f64>) -> Self {
        PivotStrategy::Omp {
            target,
            quantile: DEFAULT_OMP_QUANTILE,
        }
    }
}

pub const DEFAULT_OMP_QUANTILE: f64 = 0.9;

/// Relative floor below which a residual diagonal counts as zero.
pub const DIAGONAL_FLOOR: f64 = 1e-12;

/// Default cap on the returned rank.
pub const DEFAULT_MAX_RANK: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CholeskyOptions {
    /// Maximum rank; `None` means `min(N, DEFAULT_MAX_RANK)`.
    pub max_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactors {
    /// 0-based pivot indices in selection order.
    pub pivots: Vec<usize>,
    /// `N x m`.
    pub l: DMatrix<f64>,
    /// `m x m`, rows indexed by pivot order.
    pub r: DMatrix<f64>,
    /// Final `‖d‖₁`.
    pub residual_trace: f64,
    /// Absolute tolerance the loop ran against.
    pub epsilon: f64,
    /// `‖d⁽ⁱ⁾‖₁` for `i = 0..=m`.
    pub trace_history: Vec<f64>,
    /// Set when the loop stopped at the rank cap with residual above tolerance.
    pub rank_capped: bool,
    /// Number of oracle column queries made.
    pub column_queries: usize,
}

impl CholeskyFactors {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn size(&self) -> usize {
        self.l.nrows()
    }

    /// Rows `range` of `L`.
    pub fn l_rows(&self, start: usize, len: usize) -> DMatrix<f64> {
        self.l.rows(start, len).into_owned()
    }
}

/// Index of the largest `d_j` over non-excluded `j`, ties to the smallest
/// index. Errors if no candidate is strictly positive.
pub fn greedy_pivot(d: &[f64], excluded: &[bool]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in d.iter().enumerate() {
        if excluded.get(j).copied().unwrap_or(false) || v <= 0.0 {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.map(|(j, _)| j).ok_or(KdmError::NoPivot)
}

/// Linear-interpolation quantile (R type 7) of an unsorted slice.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Orthogonal-matching-pursuit pivot: maximizes `(f_j - w_j)² / d_j` over
/// non-excluded `j` whose residual diagonal is at least the `quantile_threshold`
/// quantile of the nonzero diagonals. Falls back to [`greedy_pivot`] when
/// every score vanishes.
pub fn omp_pivot(
    d: &[f64],
    target_values: &[f64],
    w_running: &[f64],
    quantile_threshold: f64,
    excluded: &[bool],
) -> Result<usize> {
    if target_values.len() != d.len() || w_running.len() != d.len() {
        return Err(KdmError::DimensionMismatch {
            expected: d.len(),
            got: target_values.len().min(w_running.len()),
        });
    }
    if !(0.0..1.0).contains(&quantile_threshold) {
        return Err(KdmError::invalid(format!(
            "OMP quantile must lie in [0, 1), got {quantile_threshold}"
        )));
    }
    let is_free = |j: usize| !excluded.get(j).copied().unwrap_or(false);
    let nonzero: Vec<f64> = d
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > 0.0 && is_free(j))
        .map(|(_, &v)| v)
        .collect();
    if nonzero.is_empty() {
        return Err(KdmError::NoPivot);
    }
    let eta = quantile(&nonzero, quantile_threshold);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..d.len() {
        if !is_free(j) || d[j] <= 0.0 || d[j] < eta {
            continue;
        }
        let r = target_values[j] - w_running[j];
        let score = r * r / d[j];
        match best {
            Some((_, b)) if score <= b => {}
            _ => best = Some((j, score)),
        }
    }
    match best {
        Some((j, s)) if s > 0.0 => Ok(j),
        Some(_) => greedy_pivot(d, excluded),
        None => Err(KdmError::NoPivot),
    }
}

/// Runs the pivoted incomplete Cholesky loop until `‖d‖₁ ≤ epsilon`, no
/// positive residual diagonal remains, or the rank cap is hit.
pub fn pivoted_cholesky<O: ColumnOracle + ?Sized>(
    oracle: &O,
    epsilon: f64,
    strategy: &PivotStrategy,
    options: CholeskyOptions,
) -> Result<CholeskyFactors> {
    if !(epsilon >= 0.0) {
        return Err(KdmError::invalid(format!(
            "tolerance must be nonnegative, got {epsilon}"
        )));
    }
    let size = oracle.size();
    let mut d = oracle.diagonal();
    if d.len() != size {
        return Err(KdmError::DimensionMismatch {
            expected: size,
            got: d.len(),
        });
    }
    let dmax = d.iter().fold(0.0f64, |a, &b| a.max(b));
    let neg_tol = 1e-12 * dmax.max(1.0);
    for (j, v) in d.iter_mut().enumerate() {
        if !v.is_finite() || *v < -neg_tol {
            return Err(KdmError::NotPsd { index: j, value: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let floor = DIAGONAL_FLOOR * dmax;
    let max_rank = options.max_rank.unwrap_or(DEFAULT_MAX_RANK).min(size);

    let omp = match strategy {
        PivotStrategy::Greedy => None,
        PivotStrategy::Omp { target, quantile } => {
            if target.len() != size {
                return Err(KdmError::DimensionMismatch {
                    expected: size,
                    got: target.len(),
                });
            }
            Some((target.as_slice(), *quantile))
        }
    };
    let mut w_running = vec![0.0; if omp.is_some() { size } else { 0 }];

    let mut pivots: Vec<usize> = Vec::new();
    let mut excluded = vec![false; size];
    let mut l_cols: Vec<Vec<f64>> = Vec::new();
    // r_cols[i][k] = R[k, i] for k <= i
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut trace = d.iter().sum::<f64>();
    let mut history = vec![trace];
    let mut queries = 0usize;

    while trace > epsilon && pivots.len() < max_rank && d.iter().any(|&v| v > 0.0) {
        let pi = match omp {
            None => greedy_pivot(&d, &excluded)?,
            Some((target, q)) => omp_pivot(&d, target, &w_running, q, &excluded)?,
        };
        let dp = d[pi];
        if !(dp > 0.0) {
            return Err(KdmError::NonPositivePivot { index: pi, value: dp });
        }
        let s = dp.sqrt().recip();
        let i = pivots.len();

        // ℓ = s (K[:, π] - L L[π, :]ᵀ)
        let mut ell = oracle.column(pi);
        queries += 1;
        if ell.len() != size {
            return Err(KdmError::DimensionMismatch {
                expected: size,
                got: ell.len(),
            });
        }
        for col in &l_cols {
            let c = col[pi];
            if c != 0.0 {
                for (e, v) in ell.iter_mut().zip(col) {
                    *e -= c * v;
                }
            }
        }
        ell.iter_mut().for_each(|e| *e *= s);
        // exact zeros at earlier pivot rows keep L[Π, :] triangular
        for &p in &pivots {
            ell[p] = 0.0;
        }

        // b restricted to pivot rows: b[π_k] = -s Σ_{j≥k} R[k, j] L[π, j], b[π] = s
        let mut b = vec![0.0; i + 1];
        for (k, bk) in b.iter_mut().enumerate().take(i) {
            let acc: f64 = (k..i).map(|j| r_cols[j][k] * l_cols[j][pi]).sum();
            *bk = -s * acc;
        }
        b[i] = s;

        if let Some((target, _)) = omp {
            let coef = s * (target[pi] - w_running[pi]);
            for (w, e) in w_running.iter_mut().zip(&ell) {
                *w += coef * e;
            }
        }

        for (dj, e) in d.iter_mut().zip(&ell) {
            *dj -= e * e;
            if *dj < floor {
                *dj = 0.0;
            }
        }
        d[pi] = 0.0;
        excluded[pi] = true;
        pivots.push(pi);
        l_cols.push(ell);
        r_cols.push(b);
        trace = d.iter().sum::<f64>();
        history.push(trace);
    }

    let m = pivots.len();
    let mut l = DMatrix::zeros(size, m);
    for (j, col) in l_cols.iter().enumerate() {
        l.column_mut(j).copy_from_slice(col);
    }
    let mut r = DMatrix::zeros(m, m);
    for (j, col) in r_cols.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            r[(k, j)] = *v;
        }
    }
    let rank_capped = m == max_rank && trace > epsilon && d.iter().any(|&v| v > 0.0);
    if rank_capped {
        log::warn!("pivoted Cholesky stopped at rank cap {max_rank} with residual trace {trace:e}");
    }
    Ok(CholeskyFactors {
        pivots,
        l,
        r,
        residual_trace: trace,
        epsilon,
        trace_history: history,
        rank_capped,
        column_queries: queries,
    })
}

/// Residual norms of the factor identities against an explicit matrix.
/// All entries are absolute Frobenius norms except the last two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    /// `‖K[:, Π] R - L‖`
    pub column_identity: f64,
    /// `‖Rᵀ L[Π, :] - I‖`
    pub biorthogonality: f64,
    /// `‖R Rᵀ - K[Π, Π]⁻¹‖`
    pub inverse_identity: f64,
    /// `‖L Lᵀ - K[:, Π] K[Π, Π]⁻¹ K[Π, :]‖`
    pub nystrom_identity: f64,
    /// Smallest eigenvalue of `K - L Lᵀ`.
    pub residual_min_eigenvalue: f64,
    /// `trace(K - L Lᵀ)`
    pub residual_trace: f64,
    /// `‖K[Π, Π]⁻¹‖`, for scaling `inverse_identity`.
    pub inverse_norm: f64,
    /// `‖L Lᵀ‖`, for scaling `nystrom_identity`.
    pub nystrom_norm: f64,
}

/// Recomputes every factor identity from the full matrix. Diagnostic only;
/// never fails on inconsistent factors.
pub fn verify_factors(k: &DMatrix<f64>, factors: &CholeskyFactors) -> FactorReport {
    let m = factors.rank();
    let piv = &factors.pivots;
    let k_cols = k.select_columns(piv);
    let k_pp = k_cols.select_rows(piv);
    let l_pp = factors.l.select_rows(piv);
    let eye = DMatrix::<f64>::identity(m, m);

    let column_identity = (&k_cols * &factors.r - &factors.l).norm();
    let biorthogonality = (factors.r.transpose() * &l_pp - &eye).norm();
    let llt = &factors.l * factors.l.transpose();
    let (inverse_identity, nystrom_identity, inverse_norm) = match k_pp.clone().cholesky() {
        // Reference Nyström term as (G⁻¹K_Π:)ᵀ(G⁻¹K_Π:) with K_ΠΠ = GGᵀ,
        // which avoids forming the explicit inverse.
        Some(c) => {
            let inv = c.inverse();
            let half = c
                .l()
                .solve_lower_triangular(&k_cols.transpose())
                .unwrap_or_else(|| k_cols.transpose());
            let nys = half.transpose() * &half;
            (
                (&factors.r * factors.r.transpose() - &inv).norm(),
                (&llt - nys).norm(),
                inv.norm(),
            )
        }
        None => match invert_spd(&k_pp) {
            Some(inv) => {
                let nys = &k_cols * &inv * k_cols.transpose();
                (
                    (&factors.r * factors.r.transpose() - &inv).norm(),
                    (&llt - nys).norm(),
                    inv.norm(),
                )
            }
            None => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
        },
    };
    let resid = k - &llt;
    let sym = (&resid + resid.transpose()) * 0.5;
    let residual_min_eigenvalue = if sym.nrows() > 0 {
        sym.clone().symmetric_eigenvalues().min()
    } else {
        0.0
    };
    FactorReport {
        column_identity,
        biorthogonality,
        inverse_identity,
        nystrom_identity,
        residual_min_eigenvalue,
        residual_trace: resid.trace(),
        inverse_norm,
        nystrom_norm: llt.norm(),
    }
}

fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(a.clone());
    }
    match a.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => a.clone().try_inverse(),
    }
}

/// On-disk form of [`CholeskyFactors`]: 0-based pivots, row-major `L` and `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorsArtifact {
    pub pivots: Vec<usize>,
    pub size: usize,
    pub rank: usize,
    pub l: Vec<f64>,
    pub r: Vec<f64>,
    pub epsilon: f64,
    pub residual_trace: f64,
}

impl From<&CholeskyFactors> for FactorsArtifact {
    fn from(f: &CholeskyFactors) -> Self {
        FactorsArtifact {
            pivots: f.pivots.clone(),
            size: f.size(),
            rank: f.rank(),
            l: row_major(&f.l),
            r: row_major(&f.r),
            epsilon: f.epsilon,
            residual_trace: f.residual_trace,
        }
    }
}

impl FactorsArtifact {
    pub fn into_factors(self) -> Result<CholeskyFactors> {
        let (n, m) = (self.size, self.rank);
        if self.pivots.len() != m || self.l.len() != n * m || self.r.len() != m * m {
            return Err(KdmError::invalid("inconsistent factor artifact shapes"));
        }
        Ok(CholeskyFactors {
            pivots: self.pivots,
            l: DMatrix::from_row_slice(n, m, &self.l),
            r: DMatrix::from_row_slice(m, m, &self.r),
            residual_trace: self.residual_trace,
            epsilon: self.epsilon,
            trace_history: Vec::new(),
            rank_capped: false,
            column_queries: m,
        })
    }
}

pub(crate) fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    a.transpose().as_slice().to_vec()
}
