//! Seeded generators for benchmark data.
//!
//! Rows are produced in fixed-size chunks; chunk `c` draws from the ChaCha8
//! stream `c` of the master seed. Output therefore depends only on
//! `(distribution, n, C, seed)`, never on the number of worker threads.

use std::f64::consts::{FRAC_PI_4, PI};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::JointDataset;
use crate::data::Dataset;
use crate::error::{KdmError, Result};

const CHUNK: usize = 1024;
/// Stream reserved for drawing mixture parameters.
const PARAMETER_STREAM: u64 = u64::MAX;

/// The eight bivariate dependence benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution2d {
    IndependentClouds,
    W,
    Diamond,
    Parabola,
    TwoParabola,
    Circle,
    Variance,
    Log,
}

impl Distribution2d {
    pub const ALL: [Distribution2d; 8] = [
        Distribution2d::IndependentClouds,
        Distribution2d::W,
        Distribution2d::Diamond,
        Distribution2d::Parabola,
        Distribution2d::TwoParabola,
        Distribution2d::Circle,
        Distribution2d::Variance,
        Distribution2d::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distribution2d::IndependentClouds => "independentclouds",
            Distribution2d::W => "w",
            Distribution2d::Diamond => "diamond",
            Distribution2d::Parabola => "parabola",
            Distribution2d::TwoParabola => "twoparabola",
            Distribution2d::Circle => "circle",
            Distribution2d::Variance => "variance",
            Distribution2d::Log => "log",
        }
    }

    /// Default value of the shape constant `C`.
    pub fn default_c(self) -> f64 {
        match self {
            Distribution2d::Circle => 4.2,
            Distribution2d::Diamond => 0.5,
            _ => 1.0,
        }
    }

    /// Whether `X` and `Y` are independent by construction.
    pub fn is_independent(self) -> bool {
        matches!(self, Distribution2d::IndependentClouds)
    }

    fn draw<R: Rng>(self, c: f64, rng: &mut R) -> (f64, f64) {
        let uniform = |rng: &mut R| rng.random_range(-1.0..1.0);
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let sign = |rng: &mut R| if rng.random::<bool>() { 1.0 } else { -1.0 };
        match self {
            Distribution2d::IndependentClouds => {
                let x = sign(rng) + normal(rng);
                let y = sign(rng) + normal(rng);
                (x, y)
            }
            Distribution2d::W => {
                let x = uniform(rng);
                let e: f64 = rng.random();
                (x, c * (x * x - 0.5).powi(2) + e)
            }
            Distribution2d::Diamond => {
                let u = uniform(rng);
                let v = uniform(rng);
                let u2 = uniform(rng);
                let v2 = uniform(rng);
                let e: f64 = rng.random();
                if e < c {
                    let (s, co) = FRAC_PI_4.sin_cos();
                    (u * co + v * s, -u * co + v * s)
                } else {
                    (u2, v2)
                }
            }
            Distribution2d::Parabola => {
                let x = uniform(rng);
                let e: f64 = rng.random();
                (x, c * x * x + e)
            }
            Distribution2d::TwoParabola => {
                let x = uniform(rng);
                let e: f64 = rng.random();
                let v = sign(rng);
                (x, (c * x * x + e) * v)
            }
            Distribution2d::Circle => {
                let u = uniform(rng);
                let (s, co) = (2.0 * PI * u).sin_cos();
                (c * s + normal(rng), 4.2 * co + normal(rng))
            }
            Distribution2d::Variance => {
                let x = normal(rng);
                let e = normal(rng);
                (x, e * (c * x * x + 1.0).sqrt())
            }
            Distribution2d::Log => {
                let x = normal(rng);
                let e = normal(rng);
                (x, c * (x * x).ln() + e)
            }
        }
    }
}

impl FromStr for Distribution2d {
    type Err = KdmError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Distribution2d::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| KdmError::invalid(format!("unknown distribution {s:?}")))
    }
}

impl std::fmt::Display for Distribution2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for a sub-task identified by `path`, mixed from `master` with the
/// SplitMix64 finalizer so that neighbouring paths give unrelated streams.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Fills `n` rows of `width` values; chunk `c` uses stream `c`.
fn generate<F>(n: usize, width: usize, seed: u64, row: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let mut values = vec![0.0; n * width];
    values.par_chunks_mut(CHUNK * width).enumerate().for_each(|(c, block)| {
        let mut rng = chunk_rng(seed, c as u64);
        for out in block.chunks_mut(width) {
            row(&mut rng, out);
        }
    });
    values
}

/// Draws `n` i.i.d. rows `(X, Y)` from `dist` with shape constant `c`.
pub fn sample_distribution(dist: Distribution2d, n: usize, c: f64, seed: u64) -> Result<JointDataset> {
    if n == 0 {
        return Err(KdmError::invalid("sample size must be at least 1"));
    }
    if !c.is_finite() {
        return Err(KdmError::invalid(format!("constant C must be finite, got {c}")));
    }
    if dist == Distribution2d::Diamond && !(0.0..=1.0).contains(&c) {
        return Err(KdmError::invalid(format!(
            "diamond mixing probability must lie in [0, 1], got {c}"
        )));
    }
    let values = generate(n, 2, seed, |rng, out| {
        let (x, y) = dist.draw(c, rng);
        out[0] = x;
        out[1] = y;
    });
    let (x, y): (Vec<f64>, Vec<f64>) = values.chunks(2).map(|r| (r[0], r[1])).unzip();
    JointDataset::new(
        Dataset::from_column(&x)?.with_seed(seed),
        Dataset::from_column(&y)?.with_seed(seed),
    )
}

/// Random correlation matrix: the Gram matrix `A Aᵀ` of a standard normal
/// `dim × dim` matrix, rescaled to unit diagonal.
pub fn random_correlation<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let g = &a * a.transpose();
    let s: Vec<f64> = (0..dim).map(|i| g[(i, i)].sqrt().recip()).collect();
    DMatrix::from_fn(dim, dim, |i, j| {
        let (a, b) = (i.min(j), i.max(j));
        if a == b {
            1.0
        } else {
            g[(a, b)] * s[a] * s[b]
        }
    })
}

/// Uniform draw from the probability simplex (`Dirichlet(1, …, 1)`).
pub fn simplex_weights<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Inverse-CDF categorical draw: the smallest `j` with cumulative weight `≥ u`.
pub fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if acc >= u {
            return j;
        }
    }
    weights.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Number of Gaussian components.
    pub clusters: usize,
    /// Component means are drawn from `U(-mean_range, mean_range)`.
    pub mean_range: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            clusters: 1,
            mean_range: 0.2,
        }
    }
}

/// Dimension of each block; the joint vector is `(x1, x2, y1, y2)`.
pub const MIXTURE_BLOCK: usize = 2;

/// A concrete Gaussian mixture on `R^2 × R^2` with unit-variance components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<DVector<f64>>,
    pub correlations: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
    roots: Vec<DMatrix<f64>>,
}

fn symmetric_root(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose()
}

impl GaussianMixture {
    pub fn new(means: Vec<DVector<f64>>, correlations: Vec<DMatrix<f64>>, weights: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        let dim = 2 * MIXTURE_BLOCK;
        if k == 0 || means.len() != k || correlations.len() != k {
            return Err(KdmError::invalid("mixture needs matching, nonempty component lists"));
        }
        if means.iter().any(|m| m.len() != dim) || correlations.iter().any(|c| c.shape() != (dim, dim)) {
            return Err(KdmError::invalid(format!(
                "mixture components must be {dim}-dimensional"
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(KdmError::invalid("mixture weights must be a probability vector"));
        }
        let roots = correlations.iter().map(symmetric_root).collect();
        Ok(GaussianMixture {
            means,
            correlations,
            weights,
            roots,
        })
    }

    /// Draws component parameters from `config` using `seed`.
    pub fn draw(config: &MixtureConfig, seed: u64) -> Result<Self> {
        if config.clusters == 0 {
            return Err(KdmError::invalid("mixture needs at least one cluster"));
        }
        if !(config.mean_range >= 0.0 && config.mean_range.is_finite()) {
            return Err(KdmError::invalid("mean range must be finite and non-negative"));
        }
        let dim = 2 * MIXTURE_BLOCK;
        let mut rng = chunk_rng(seed, PARAMETER_STREAM);
        let mut means = Vec::with_capacity(config.clusters);
        let mut correlations = Vec::with_capacity(config.clusters);
        for _ in 0..config.clusters {
            correlations.push(random_correlation(dim, &mut rng));
            let r = config.mean_range;
            means.push(DVector::from_fn(dim, |_, _| {
                if r > 0.0 {
                    rng.random_range(-r..r)
                } else {
                    0.0
                }
            }));
        }
        let weights = simplex_weights(config.clusters, &mut rng);
        GaussianMixture::new(means, correlations, weights)
    }

    /// Draws `n` i.i.d. rows and their component labels.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(JointDataset, Vec<usize>)> {
        if n == 0 {
            return Err(KdmError::invalid("sample size must be at least 1"));
        }
        let dim = 2 * MIXTURE_BLOCK;
        // the label rides along as an extra column
        let values = generate(n, dim + 1, seed, |rng, out| {
            let j = categorical(&self.weights, rng.random());
            let xi = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(rng));
            let z = &self.means[j] + &self.roots[j] * xi;
            out[..dim].copy_from_slice(z.as_slice());
            out[dim] = j as f64;
        });
        let mut xs = Vec::with_capacity(n * MIXTURE_BLOCK);
        let mut ys = Vec::with_capacity(n * MIXTURE_BLOCK);
        let mut labels = Vec::with_capacity(n);
        for r in values.chunks(dim + 1) {
            xs.extend_from_slice(&r[..MIXTURE_BLOCK]);
            ys.extend_from_slice(&r[MIXTURE_BLOCK..dim]);
            labels.push(r[dim] as usize);
        }
        let joint = JointDataset::new(
            Dataset::new(n, MIXTURE_BLOCK, xs)?.with_seed(seed),
            Dataset::new(n, MIXTURE_BLOCK, ys)?.with_seed(seed),
        )?;
        Ok((joint, labels))
    }
}

/// Draws mixture parameters and then `n_total` rows, all from `seed`.
pub fn sample_gaussian_mixture(config: &MixtureConfig, n_total: usize, seed: u64) -> Result<JointDataset> {
    let mixture = GaussianMixture::draw(config, seed)?;
    Ok(mixture.sample(n_total, seed)?.0)
}
