//! Reproducing kernels and kernel matrices.
//!
//! Three families are supported:
//!
//! | family     | k(z, z')                               |
//! |------------|----------------------------------------|
//! | Gaussian   | `exp(-‖z - z'‖² / (2 rho))`            |
//! | Laplace    | `exp(-rho ‖z - z'‖)`                   |
//! | Polynomial | `(⟨z, z'⟩ + c)^q`                      |
//!
//! The polynomial kernel is unbounded, so its sup-norm is only available as
//! an empirical surrogate over supplied data.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{KdmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Laplace,
    Polynomial,
}

impl std::str::FromStr for KernelFamily {
    type Err = KdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gauss" | "rbf" => Ok(KernelFamily::Gaussian),
            "laplace" | "laplacian" => Ok(KernelFamily::Laplace),
            "polynomial" | "poly" => Ok(KernelFamily::Polynomial),
            other => Err(KdmError::invalid(format!("unknown kernel family {other:?}"))),
        }
    }
}

/// Kernel family and hyperparameters.
///
/// Serialized as `{"family": ..., "rho": ..., "c": ..., "q": ...}`; `rho` is
/// the Gaussian length-scale (squared-distance units) or the Laplace inverse
/// length-scale depending on the family, `c` and `q` are the polynomial
/// offset and degree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "one_u32")]
    pub q: u32,
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

impl KernelSpec {
    pub fn gaussian(rho: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            rho,
            c: 1.0,
            q: 1,
        }
    }

    pub fn laplace(rho: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Laplace,
            rho,
            c: 1.0,
            q: 1,
        }
    }

    pub fn polynomial(c: f64, q: u32) -> Self {
        KernelSpec {
            family: KernelFamily::Polynomial,
            rho: 1.0,
            c,
            q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            KernelFamily::Gaussian if !(self.rho > 0.0 && self.rho.is_finite()) => Err(KdmError::invalid(format!(
                "gaussian rho must be positive, got {}",
                self.rho
            ))),
            KernelFamily::Laplace if !(self.rho >= 0.0 && self.rho.is_finite()) => Err(KdmError::invalid(format!(
                "laplace rho must be nonnegative, got {}",
                self.rho
            ))),
            KernelFamily::Polynomial if self.q < 1 => Err(KdmError::invalid("polynomial degree must be at least 1")),
            KernelFamily::Polynomial if !(self.c >= 0.0 && self.c.is_finite()) => Err(KdmError::invalid(format!(
                "polynomial offset must be nonnegative, got {}",
                self.c
            ))),
            _ => Ok(()),
        }
    }

    /// True when `sup_z k(z, z)` is finite.
    pub fn is_bounded(&self) -> bool {
        self.family != KernelFamily::Polynomial
    }

    /// Kernel value without argument checks. Both slices must have equal length.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-sq_dist(a, b) / (2.0 * self.rho)).exp(),
            KernelFamily::Laplace => (-self.rho * sq_dist(a, b).sqrt()).exp(),
            KernelFamily::Polynomial => (dot(a, b) + self.c).powi(self.q as i32),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a‖² + ‖b‖² - 2⟨a, b⟩`, clamped at zero.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let r = dot(a, a) + dot(b, b) - 2.0 * dot(a, b);
    r.max(0.0)
}

/// Evaluates `k(z1, z2)`.
pub fn eval_kernel(spec: &KernelSpec, z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(KdmError::DimensionMismatch {
            expected: z1.len(),
            got: z2.len(),
        });
    }
    for (arg, z) in [z1, z2].into_iter().enumerate() {
        if let Some(col) = z.iter().position(|v| !v.is_finite()) {
            return Err(KdmError::NonFinite { row: arg, col });
        }
    }
    Ok(spec.eval_unchecked(z1, z2))
}

/// Dense matrix with entry `(i, j) = k(rows_i, cols_j)`.
pub fn cross_kernel_matrix(spec: &KernelSpec, rows: &Dataset, cols: &Dataset) -> Result<DMatrix<f64>> {
    if rows.dim() != cols.dim() {
        return Err(KdmError::DimensionMismatch {
            expected: rows.dim(),
            got: cols.dim(),
        });
    }
    let (nr, nc) = (rows.len(), cols.len());
    // row-major scratch, filled row by row in parallel; every entry is an
    // independent evaluation so the result does not depend on scheduling
    let mut buf = vec![0.0; nr * nc];
    buf.par_chunks_mut(nc.max(1)).enumerate().for_each(|(i, out)| {
        let zi = rows.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = spec.eval_unchecked(zi, cols.row(j));
        }
    });
    Ok(DMatrix::from_row_slice(nr, nc, &buf))
}

/// Kernel sup-norm `sup_z k(z, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSup {
    pub value: f64,
    /// Set when `value` is a maximum over data rather than a true supremum.
    pub empirical: bool,
}

pub fn kernel_sup(spec: &KernelSpec, data: Option<&Dataset>) -> Result<KernelSup> {
    match spec.family {
        KernelFamily::Gaussian | KernelFamily::Laplace => Ok(KernelSup {
            value: 1.0,
            empirical: false,
        }),
        KernelFamily::Polynomial => {
            let data =
                data.ok_or_else(|| KdmError::invalid("polynomial kernel is unbounded; data is required for kappa"))?;
            let value = data
                .rows()
                .map(|z| spec.eval_unchecked(z, z))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(KernelSup { value, empirical: true })
        }
    }
}
