//! Chi-square test of `dQ/dP = p_star`.
//!
//! Under the null the scaled score `v = n^{-1/2}(L_Qᵀ1 − L_Pᵀp)` is
//! asymptotically `N(0, Σ)` with `Σ` assembled from the low-rank factor
//! blocks. Projecting `v` onto the leading eigenvectors of `Σ` and whitening
//! gives a statistic that is `χ²(ℓ)` for `ℓ` retained directions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{KdmError, Result};
use crate::estimator::KdmModel;

/// Eigenvalues below this fraction of the largest are always treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Default relative threshold for choosing `ℓ`.
pub const DEFAULT_RELATIVE_T: f64 = 1e-9;

/// Rule selecting the number `ℓ` of eigen-directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "t")]
pub enum Truncation {
    /// `ℓ = max{i : w_i ≥ t w_1}`
    Relative(f64),
    /// `ℓ = min{i : Σ_{j≤i} w_j ≥ t Σ_j w_j}`
    ExplainedVariation(f64),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Relative(DEFAULT_RELATIVE_T)
    }
}

impl Truncation {
    fn threshold(&self) -> f64 {
        match *self {
            Truncation::Relative(t) | Truncation::ExplainedVariation(t) => t,
        }
    }

    /// Number of retained directions for eigenvalues sorted nonincreasing.
    pub fn select(&self, w: &[f64]) -> usize {
        let Some(&w1) = w.first() else { return 0 };
        if !(w1 > 0.0) {
            return 0;
        }
        let usable = w.iter().take_while(|&&x| x > EIGEN_FLOOR * w1).count();
        match *self {
            Truncation::Relative(t) => w[..usable].iter().take_while(|&&x| x >= t * w1).count(),
            Truncation::ExplainedVariation(t) => {
                let total: f64 = w.iter().filter(|&&x| x > 0.0).sum();
                let mut acc = 0.0;
                for (i, &x) in w[..usable].iter().enumerate() {
                    acc += x;
                    if acc >= t * total {
                        return i + 1;
                    }
                }
                usable
            }
        }
    }
}

/// Finite-sample bound check on `‖(L_PᵀL_P + nλ)⁻¹(L_Qᵀ1 − L_Pᵀp)‖₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub eta: f64,
    pub c_fs: f64,
    pub c_ae: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub ell: usize,
    /// Eigenvalues of `Σ`, nonincreasing.
    pub eigenvalues: Vec<f64>,
    pub p_value: f64,
    pub v_lambda: Vec<f64>,
    pub truncation: Truncation,
    pub bound_check: Option<BoundCheck>,
}

fn check_blocks(model: &KdmModel) -> Result<()> {
    let m = model.rank();
    let n = model.n;
    if model.l_p.shape() != (n, m) || model.l_q.shape() != (n, m) || model.prior_values.len() != n {
        return Err(KdmError::invalid("model is missing its factor blocks"));
    }
    Ok(())
}

/// `v = n^{-1/2}(L_Qᵀ1 − L_Pᵀp)`.
pub fn sample_variable(model: &KdmModel) -> Result<DVector<f64>> {
    check_blocks(model)?;
    let rhs = model.l_q.row_sum().transpose() - model.l_p.transpose() * &model.prior_values;
    Ok(rhs / (model.n as f64).sqrt())
}

/// `Σ = n⁻¹L_QᵀL_Q − n⁻²L_Qᵀ11ᵀL_Q + n⁻¹L_Pᵀdiag(p)²L_P − n⁻²L_Pᵀ11ᵀL_P`,
/// symmetrized.
pub fn covariance_matrix(model: &KdmModel) -> Result<DMatrix<f64>> {
    check_blocks(model)?;
    let n = model.n as f64;
    let (lp, lq) = (&model.l_p, &model.l_q);
    let sq = lq.row_sum().transpose();
    let sp = lp.row_sum().transpose();
    let mut weighted = lp.clone();
    for (mut row, p) in weighted.row_iter_mut().zip(model.prior_values.iter()) {
        row *= *p;
    }
    let sigma = lq.transpose() * lq / n - &sq * sq.transpose() / (n * n) + weighted.transpose() * &weighted / n
        - &sp * sp.transpose() / (n * n);
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Upper tail `P[χ²(dof) ≥ x]`.
pub fn chi_square_upper_tail(x: f64, dof: usize) -> Result<f64> {
    if !(x >= 0.0) || dof == 0 {
        return Err(KdmError::invalid(format!(
            "chi-square tail needs x >= 0 and dof >= 1, got x = {x}, dof = {dof}"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(dof as f64 / 2.0, x / 2.0).clamp(0.0, 1.0))
}

/// Coefficients of the finite-sample error bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub c_fs: f64,
    pub c_ae: f64,
    /// `(c_fs + c_ae) / (λ √n)`
    pub rhs: f64,
}

/// `C_FS(η, s) = 2 sqrt(2 log(2/η) κ) (1 + π + s sqrt(κ))`,
/// `C_AE(ε, λ) = sqrt(ε) (1 + sqrt(κ/λ)) (π + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_sample_bound(
    eta: f64,
    lambda: f64,
    n: usize,
    epsilon: f64,
    kappa_inf: f64,
    pi_inf: f64,
    s: f64,
) -> Result<BoundTerms> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(KdmError::invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    if !(lambda > 0.0) || n == 0 || !(epsilon >= 0.0) || !(kappa_inf >= 0.0) || !(pi_inf >= 0.0) || !(s >= 0.0) {
        return Err(KdmError::invalid("bound arguments out of range"));
    }
    let c_fs = 2.0 * (2.0 * (2.0 / eta).ln() * kappa_inf).sqrt() * (1.0 + pi_inf + s * kappa_inf.sqrt());
    let c_ae = epsilon.sqrt() * (1.0 + (kappa_inf / lambda).sqrt()) * (pi_inf + 1.0);
    Ok(BoundTerms {
        c_fs,
        c_ae,
        rhs: (c_fs + c_ae) / (lambda * (n as f64).sqrt()),
    })
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// nonincreasing; the columns of the returned matrix are the eigenvectors.
pub fn sorted_eigen(sigma: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let m = sigma.nrows();
    if m == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let eig = sigma.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let w = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let a = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    (w, a)
}

/// `T = Σ_{i≤ℓ} (a_iᵀv)² / w_i` for sorted eigenpairs.
pub fn statistic(v: &DVector<f64>, w: &[f64], a: &DMatrix<f64>, ell: usize) -> f64 {
    (0..ell)
        .map(|i| {
            let proj = a.column(i).dot(v);
            proj * proj / w[i]
        })
        .sum()
}

/// Runs the test. With `eta`, also checks the finite-sample inequality that
/// holds with probability at least `1 − eta` under the null.
pub fn run_test(model: &KdmModel, truncation: Truncation, eta: Option<f64>) -> Result<TestResult> {
    let t = truncation.threshold();
    if !(t > 0.0 && t < 1.0) {
        return Err(KdmError::invalid(format!(
            "truncation threshold must lie in (0, 1), got {t}"
        )));
    }
    let v = sample_variable(model)?;
    let sigma = covariance_matrix(model)?;
    let (w, a) = sorted_eigen(&sigma);
    let ell = truncation.select(&w);
    let (statistic, p_value) = if ell == 0 {
        (0.0, 1.0)
    } else {
        let s = statistic(&v, &w, &a, ell);
        (s, chi_square_upper_tail(s, ell)?)
    };
    let bound_check = match eta {
        None => None,
        Some(eta) => {
            let terms = finite_sample_bound(
                eta,
                model.lambda,
                model.n,
                model.epsilon,
                model.kappa_inf,
                model.prior.pi_inf,
                0.0,
            )?;
            let lhs = model.solution_norm();
            Some(BoundCheck {
                lhs,
                rhs: terms.rhs,
                eta,
                c_fs: terms.c_fs,
                c_ae: terms.c_ae,
                satisfied: lhs <= terms.rhs,
            })
        }
    };
    Ok(TestResult {
        statistic,
        ell,
        eigenvalues: w,
        p_value,
        v_lambda: v.as_slice().to_vec(),
        truncation,
        bound_check,
    })
}
