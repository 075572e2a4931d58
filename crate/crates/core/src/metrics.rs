//! Forecast scoring: the weighted energy score, out-of-sample R² for first
//! and second moments, and the Dawid–Sebastiani score.
//!
//! Differentials are always *baseline minus KDM*, so positive numbers favor
//! the kernel model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{KdmError, Result};

/// Ridge factor applied to near-singular covariances before scoring.
pub const DS_RIDGE: f64 = 1e-8;
/// Covariances with `λ_min ≤ DS_PD_THRESHOLD · tr Σ` get the ridge.
pub const DS_PD_THRESHOLD: f64 = 1e-10;

/// Realized outcome together with one model's predicted mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub realized: DVector<f64>,
    pub predicted_mean: DVector<f64>,
    pub predicted_cov: DMatrix<f64>,
}

impl ForecastRecord {
    pub fn new(realized: DVector<f64>, predicted_mean: DVector<f64>, predicted_cov: DMatrix<f64>) -> Result<Self> {
        let d = realized.len();
        if predicted_mean.len() != d {
            return Err(KdmError::DimensionMismatch {
                expected: d,
                got: predicted_mean.len(),
            });
        }
        if predicted_cov.shape() != (d, d) {
            return Err(KdmError::DimensionMismatch {
                expected: d,
                got: predicted_cov.nrows(),
            });
        }
        let scale = predicted_cov.amax().max(1.0);
        if (&predicted_cov - predicted_cov.transpose()).amax() > 1e-10 * scale {
            return Err(KdmError::invalid("predicted covariance is not symmetric"));
        }
        Ok(ForecastRecord {
            realized,
            predicted_mean,
            predicted_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.realized.len()
    }

    /// Predicted second moment `Σ + μμᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.predicted_cov + &self.predicted_mean * self.predicted_mean.transpose()
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(KdmError::invalid(format!("misaligned records: {a} vs {b}")));
    }
    if a == 0 {
        return Err(KdmError::invalid("no records to score"));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `‖x_i − x_j‖₂` for all ensemble pairs.
pub fn pairwise_distances(xs: &Dataset) -> DMatrix<f64> {
    let m = xs.len();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = dist(xs.row(i), xs.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Weighted energy score
/// `(1/m) Σ w_i ‖y − x_i‖ − (1/2m²) Σ_ij w_i w_j ‖x_i − x_j‖`.
///
/// With weights averaging one this is the energy score of the discrete
/// forecast putting mass `w_i / m` on `x_i`.
pub fn energy_score(y: &[f64], xs: &Dataset, weights: &[f64]) -> Result<f64> {
    energy_score_with(y, xs, weights, &pairwise_distances(xs))
}

/// [`energy_score`] with the ensemble distance matrix precomputed.
pub fn energy_score_with(y: &[f64], xs: &Dataset, weights: &[f64], distances: &DMatrix<f64>) -> Result<f64> {
    let m = xs.len();
    if weights.len() != m {
        return Err(KdmError::DimensionMismatch {
            expected: m,
            got: weights.len(),
        });
    }
    if y.len() != xs.dim() {
        return Err(KdmError::DimensionMismatch {
            expected: xs.dim(),
            got: y.len(),
        });
    }
    if distances.shape() != (m, m) {
        return Err(KdmError::DimensionMismatch {
            expected: m,
            got: distances.nrows(),
        });
    }
    if m == 0 {
        return Err(KdmError::invalid("empty ensemble"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(KdmError::invalid("energy score weights must be finite"));
    }
    let mf = m as f64;
    let first: f64 = xs.rows().zip(weights).map(|(x, w)| w * dist(y, x)).sum::<f64>() / mf;
    let mut second = 0.0;
    for i in 0..m {
        if weights[i] == 0.0 {
            continue;
        }
        let row: f64 = (0..m).map(|j| weights[j] * distances[(j, i)]).sum();
        second += weights[i] * row;
    }
    Ok(first - second / (2.0 * mf * mf))
}

/// Mean of `baseline_i − kdm_i` over aligned per-point scores.
pub fn energy_score_differential(baseline: &[f64], kdm: &[f64]) -> Result<f64> {
    check_aligned(baseline.len(), kdm.len())?;
    Ok(baseline.iter().zip(kdm).map(|(b, k)| b - k).sum::<f64>() / baseline.len() as f64)
}

/// Out-of-sample R²: `1 − Σ‖y − μ_KDM‖² / Σ‖y − μ_base‖²`.
pub fn r2_oos(kdm: &[ForecastRecord], baseline_means: &[DVector<f64>]) -> Result<f64> {
    check_aligned(kdm.len(), baseline_means.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, b) in kdm.iter().zip(baseline_means) {
        if b.len() != r.dim() {
            return Err(KdmError::DimensionMismatch {
                expected: r.dim(),
                got: b.len(),
            });
        }
        num += (&r.realized - &r.predicted_mean).norm_squared();
        den += (&r.realized - b).norm_squared();
    }
    if den <= 0.0 {
        return Err(KdmError::invalid("baseline errors are all zero"));
    }
    Ok(1.0 - num / den)
}

/// Second-moment R²: Frobenius errors of `Σ + μμᵀ` against `y yᵀ`.
pub fn r2_second_moment(kdm: &[ForecastRecord], baseline: &[ForecastRecord]) -> Result<f64> {
    check_aligned(kdm.len(), baseline.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, b) in kdm.iter().zip(baseline) {
        if k.realized != b.realized {
            return Err(KdmError::invalid("records disagree on the realized outcome"));
        }
        let yy = &k.realized * k.realized.transpose();
        num += (&yy - k.second_moment()).norm_squared();
        den += (&yy - b.second_moment()).norm_squared();
    }
    if den <= 0.0 {
        return Err(KdmError::invalid("baseline second-moment errors are all zero"));
    }
    Ok(1.0 - num / den)
}

/// Dawid–Sebastiani score `log det Σ + (x − μ)ᵀ Σ⁻¹ (x − μ)`, evaluated
/// through a Cholesky factor. Near-singular `Σ` gets a ridge of
/// `DS_RIDGE · tr Σ / d` first.
pub fn dawid_sebastiani(x: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mu.len() != d || sigma.shape() != (d, d) {
        return Err(KdmError::DimensionMismatch {
            expected: d,
            got: mu.len().max(sigma.nrows()),
        });
    }
    let tr = sigma.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(KdmError::NotPsd { index: 0, value: tr });
    }
    let min_eig = sigma.clone().symmetric_eigenvalues().min();
    let mut s = sigma.clone();
    if min_eig <= DS_PD_THRESHOLD * tr {
        log::debug!("regularizing covariance with min eigenvalue {min_eig:e}");
        for i in 0..d {
            s[(i, i)] += DS_RIDGE * tr / d as f64;
        }
    }
    let chol = s.cholesky().ok_or(KdmError::NotPsd {
        index: 0,
        value: min_eig,
    })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = x - mu;
    let z = chol
        .l()
        .solve_lower_triangular(&r)
        .ok_or_else(|| KdmError::Solve("triangular solve".into()))?;
    Ok(log_det + z.norm_squared())
}

/// Dawid–Sebastiani score of one record.
pub fn record_score(r: &ForecastRecord) -> Result<f64> {
    dawid_sebastiani(&r.realized, &r.predicted_mean, &r.predicted_cov)
}

/// Mean of `S(baseline) − S(KDM)` over aligned records.
pub fn excess_scoring_loss(kdm: &[ForecastRecord], baseline: &[ForecastRecord]) -> Result<f64> {
    check_aligned(kdm.len(), baseline.len())?;
    let diffs: Vec<f64> = kdm
        .par_iter()
        .zip(baseline)
        .map(|(k, b)| Ok(record_score(b)? - record_score(k)?))
        .collect::<Result<_>>()?;
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(y: &[f64], mu: &[f64], cov: DMatrix<f64>) -> ForecastRecord {
        ForecastRecord::new(DVector::from_column_slice(y), DVector::from_column_slice(mu), cov).unwrap()
    }

    #[test]
    fn energy_score_examples() {
        let xs = Dataset::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(energy_score(&[0.0, 0.0], &xs, &[1.0]).unwrap(), 5.0);

        let xs = Dataset::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(energy_score(&[1.0, 1.0], &xs, &[0.3, 2.0, 0.7]).unwrap(), 0.0);

        // (1/2)(1 + 1) − (1/8)(0 + 2 + 2 + 0)
        let xs = Dataset::from_column(&[1.0, -1.0]).unwrap();
        assert_eq!(energy_score(&[0.0], &xs, &[1.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn energy_score_rejects_mismatch() {
        let xs = Dataset::from_column(&[1.0, -1.0]).unwrap();
        assert!(energy_score(&[0.0], &xs, &[1.0]).is_err());
        assert!(energy_score(&[0.0, 1.0], &xs, &[1.0, 1.0]).is_err());
        assert!(energy_score(&[0.0], &xs, &[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn differential_examples() {
        assert_eq!(energy_score_differential(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((energy_score_differential(&[1.2], &[0.7]).unwrap() - 0.5).abs() < 1e-15);
        assert!(energy_score_differential(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn r2_examples() {
        let i = DMatrix::identity(2, 2);
        let y = [1.0, -2.0];
        let base = vec![DVector::from_column_slice(&[3.0, 0.0])];
        let same = vec![rec(&y, &[3.0, 0.0], i.clone())];
        assert_eq!(r2_oos(&same, &base).unwrap(), 0.0);
        let exact = vec![rec(&y, &y, i.clone())];
        assert_eq!(r2_oos(&exact, &base).unwrap(), 1.0);
        // KDM error (1, 1) is half the baseline error (2, 2)
        let half = vec![rec(&y, &[2.0, -1.0], i.clone())];
        assert!((r2_oos(&half, &base).unwrap() - 0.75).abs() < 1e-15);
        let zero = vec![DVector::from_column_slice(&y)];
        assert!(r2_oos(&half, &zero).is_err());
    }

    #[test]
    fn r2_second_moment_examples() {
        let c = |v: f64| DMatrix::from_element(1, 1, v);
        let kdm = vec![rec(&[2.0], &[0.0], c(4.0))];
        let base = vec![rec(&[2.0], &[0.0], c(1.0))];
        assert_eq!(r2_second_moment(&kdm, &base).unwrap(), 1.0);
        assert_eq!(r2_second_moment(&base, &base).unwrap(), 0.0);
        // exact second moment with a nonzero mean: Σ + μμᵀ = 1 + 3 = 4
        let kdm = vec![rec(&[2.0], &[3f64.sqrt()], c(1.0))];
        assert!((r2_second_moment(&kdm, &base).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dawid_sebastiani_examples() {
        let v = |s: &[f64]| DVector::from_column_slice(s);
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(
            dawid_sebastiani(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0]), &i3).unwrap(),
            0.0
        );
        assert!((dawid_sebastiani(&v(&[1.0]), &v(&[0.0]), &DMatrix::identity(1, 1)).unwrap() - 1.0).abs() < 1e-15);
        let s = DMatrix::from_diagonal(&v(&[2.0, 2.0]));
        let got = dawid_sebastiani(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), &s).unwrap();
        assert!((got - (4f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dawid_sebastiani_regularizes_singular() {
        let v = |s: &[f64]| DVector::from_column_slice(s);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let got = dawid_sebastiani(&v(&[0.5, 0.5]), &v(&[0.0, 0.0]), &s).unwrap();
        assert!(got.is_finite());
        assert!(dawid_sebastiani(&v(&[0.0]), &v(&[0.0]), &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn excess_loss_examples() {
        let c = |v: f64| DMatrix::from_element(1, 1, v);
        let a = vec![rec(&[1.0], &[0.0], c(1.0))];
        assert_eq!(excess_scoring_loss(&a, &a).unwrap(), 0.0);
        // S(base) = 3 from (x−μ)² = 3, S(kdm) = 1
        let base = vec![rec(&[3f64.sqrt()], &[0.0], c(1.0))];
        assert!((excess_scoring_loss(&a, &base).unwrap() - 2.0).abs() < 1e-12);
        assert!(excess_scoring_loss(&a, &[]).is_err());
    }

    proptest! {
        #[test]
        fn energy_score_translation_invariant(
            pts in prop::collection::vec((-8i32..8, -8i32..8), 1..12),
            y in (-8i32..8, -8i32..8),
            shift in (-64i32..64, -64i32..64),
        ) {
            // integer-valued coordinates keep the shifted distances bit-identical
            let rows: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a as f64, b as f64]).collect();
            let moved: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] + shift.0 as f64, r[1] + shift.1 as f64]).collect();
            let w = vec![1.0; rows.len()];
            let a = energy_score(&[y.0 as f64, y.1 as f64], &Dataset::from_rows(&rows).unwrap(), &w).unwrap();
            let b = energy_score(
                &[(y.0 + shift.0) as f64, (y.1 + shift.1) as f64],
                &Dataset::from_rows(&moved).unwrap(),
                &w,
            ).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ds_excess_is_mahalanobis(
            a in prop::collection::vec(-2.0f64..2.0, 9),
            x in prop::collection::vec(-3.0f64..3.0, 3),
            mu in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let a = DMatrix::from_column_slice(3, 3, &a);
            let sigma = &a * a.transpose() + DMatrix::identity(3, 3);
            let x = DVector::from_vec(x);
            let mu = DVector::from_vec(mu);
            let gap = dawid_sebastiani(&x, &mu, &sigma).unwrap() - dawid_sebastiani(&mu, &mu, &sigma).unwrap();
            let r = &x - &mu;
            let maha = r.dot(&(sigma.clone().try_inverse().unwrap() * &r));
            prop_assert!(gap >= -1e-12);
            prop_assert!((gap - maha).abs() < 1e-9 * (1.0 + maha));
        }

        #[test]
        fn r2_never_exceeds_one(
            errs in prop::collection::vec((-5.0f64..5.0, 0.1f64..5.0), 1..20),
        ) {
            let recs: Vec<ForecastRecord> = errs
                .iter()
                .map(|&(e, _)| rec(&[0.0], &[e], DMatrix::identity(1, 1)))
                .collect();
            let base: Vec<DVector<f64>> = errs.iter().map(|&(_, b)| DVector::from_element(1, b)).collect();
            let r = r2_oos(&recs, &base).unwrap();
            prop_assert!(r <= 1.0);
            let all_zero = errs.iter().all(|&(e, _)| e == 0.0);
            prop_assert_eq!(r == 1.0, all_zero);
        }
    }
}
