//! Sample containers.

use serde::{Deserialize, Serialize};

use crate::error::{KdmError, Result};

/// A row-major `n x d` matrix of sample points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    d: usize,
    values: Vec<f64>,
    /// Seed of the generator that produced the data, when known.
    pub seed: Option<u64>,
    /// Affine transform already applied to `values`, if any.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    /// Builds a dataset from row-major values. Rejects empty shapes and
    /// non-finite entries.
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(KdmError::invalid(format!(
                "dataset must have at least one row and one column, got {n}x{d}"
            )));
        }
        if values.len() != n * d {
            return Err(KdmError::DimensionMismatch {
                expected: n * d,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(KdmError::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        Ok(Dataset {
            n,
            d,
            values,
            seed: None,
            standardization: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(n * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(KdmError::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Dataset::new(n, d, values)
    }

    /// One-dimensional dataset from scalar observations.
    pub fn from_column(xs: &[f64]) -> Result<Self> {
        Dataset::new(xs.len(), 1, xs.to_vec())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            n: idx.len(),
            d: self.d,
            values,
            seed: self.seed,
            standardization: self.standardization.clone(),
        }
    }

    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.n)).collect();
        self.select_rows(&idx)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Dataset) -> Result<Dataset> {
        if self.d != other.d {
            return Err(KdmError::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Dataset {
            n: self.n + other.n,
            d: self.d,
            values,
            seed: self.seed,
            standardization: self.standardization.clone(),
        })
    }

    /// Applies a fitted column transform and records it.
    pub fn standardized(&self, t: &Standardization) -> Result<Dataset> {
        if t.mean.len() != self.d {
            return Err(KdmError::DimensionMismatch {
                expected: t.mean.len(),
                got: self.d,
            });
        }
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(self.d) {
            t.apply_in_place(row);
        }
        Ok(Dataset {
            n: self.n,
            d: self.d,
            values,
            seed: self.seed,
            standardization: Some(t.clone()),
        })
    }
}

/// Per-column z-scoring `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Fits column means and population standard deviations over the rows
    /// of all given datasets. Constant columns get scale 1.
    pub fn fit(sets: &[&Dataset]) -> Result<Self> {
        let d = sets
            .first()
            .map(|s| s.dim())
            .ok_or_else(|| KdmError::invalid("no data to standardize"))?;
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for s in sets {
            if s.dim() != d {
                return Err(KdmError::DimensionMismatch {
                    expected: d,
                    got: s.dim(),
                });
            }
            for row in s.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
                count += 1;
            }
        }
        let cnt = count as f64;
        mean.iter_mut().for_each(|m| *m /= cnt);
        let mut var = vec![0.0; d];
        for s in sets {
            for row in s.rows() {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / cnt).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardization { mean, scale })
    }

    pub fn apply_in_place(&self, z: &mut [f64]) {
        for ((x, m), s) in z.iter_mut().zip(&self.mean).zip(&self.scale) {
            *x = (*x - m) / s;
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        self.apply_in_place(&mut out);
        out
    }
}
