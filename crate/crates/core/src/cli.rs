//! Command-line front end.
//!
//! Every subcommand reads its options from flags and, optionally, from a
//! JSON file given with `--config` whose keys are the long flag names in
//! snake case. Flags win over the file. Results go to `--out` (refusing to
//! replace an existing file unless `--force` is given); a `<out>.meta.json`
//! sidecar records wall time and thread count so that the main artifact stays
//! byte-for-byte reproducible.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conditional::{ConditionalModel, ConditionalOptions, JointDataset, SplitScheme, DEFAULT_GRID_CAP};
use crate::data::{Dataset, Standardization};
use crate::error::{KdmError, Result};
use crate::estimator::{cross_validate, fit, FitOptions, KdmModel, ModelBundle, PriorKind, PriorSpec, Tolerance};
use crate::hypothesis::{run_test, Truncation, DEFAULT_RELATIVE_T};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::metrics::{
    dawid_sebastiani, energy_score_differential, energy_score_with, pairwise_distances, r2_oos, r2_second_moment,
    ForecastRecord,
};
use crate::simulate::{derive_seed, sample_distribution, sample_gaussian_mixture, Distribution2d, MixtureConfig};
use crate::VERSION;

/// Failure of a CLI invocation, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Kdm(#[from] KdmError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Kdm(e) if e.is_numeric() => 2,
            CliError::Kdm(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Kdm(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Kdm(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "kdm",
    version,
    about = "Kernel density machines: density ratios, tests, conditional distributions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a density-ratio model from a P-sample and a Q-sample.
    Fit(FitArgs),
    /// Chi-square test of the prior density ratio.
    Test(TestArgs),
    /// Conditional means and covariances from a joint sample.
    Condexp(CondexpArgs),
    /// Draw a seeded benchmark dataset.
    Simulate(SimulateArgs),
    /// Score forecasts against realized outcomes.
    Score(ScoreArgs),
    /// Benchmark studies.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Rejection rates of the independence test over simulated datasets.
    Independence(BenchArgs),
}

/// Kernel, regularization and decomposition settings shared by subcommands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOpts {
    /// Kernel family: gaussian, laplace or polynomial.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Kernel scale(s); several values form a cross-validation grid.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub rho: Option<Vec<f64>>,
    /// Polynomial offset.
    #[arg(long = "poly-c")]
    pub poly_c: Option<f64>,
    /// Polynomial degree.
    #[arg(long = "poly-q")]
    pub poly_q: Option<u32>,
    /// Regularization weight(s); several values form a cross-validation grid.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub lambda: Option<Vec<f64>>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Decomposition tolerance relative to the kernel-matrix trace.
    #[arg(long = "eps-rel")]
    pub eps_rel: Option<f64>,
    /// Upper bound on the decomposition rank.
    #[arg(long = "max-rank")]
    pub max_rank: Option<usize>,
    /// Prior density ratio: one or zero.
    #[arg(long)]
    pub prior: Option<String>,
    /// Z-score all columns before fitting.
    #[arg(long)]
    pub standardize: bool,
}

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_FOLDS: usize = 5;

impl ModelOpts {
    pub fn family(&self) -> Result<KernelFamily> {
        self.kernel.as_deref().unwrap_or("gaussian").parse()
    }

    /// Cartesian product of kernel scales and λ values.
    pub fn grid(&self) -> Result<Vec<(KernelSpec, f64)>> {
        let family = self.family()?;
        let lambdas = self.lambda.clone().unwrap_or_else(|| vec![DEFAULT_LAMBDA]);
        let kernels: Vec<KernelSpec> = match family {
            KernelFamily::Polynomial => vec![KernelSpec::polynomial(
                self.poly_c.unwrap_or(1.0),
                self.poly_q.unwrap_or(1),
            )],
            _ => self
                .rho
                .clone()
                .unwrap_or_else(|| vec![1.0])
                .into_iter()
                .map(|rho| KernelSpec {
                    family,
                    rho,
                    c: 1.0,
                    q: 1,
                })
                .collect(),
        };
        if kernels.is_empty() || lambdas.is_empty() {
            return Err(KdmError::invalid("empty kernel or lambda grid"));
        }
        let mut grid = Vec::with_capacity(kernels.len() * lambdas.len());
        for k in &kernels {
            k.validate()?;
            for &l in &lambdas {
                grid.push((*k, l));
            }
        }
        Ok(grid)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tolerance: Tolerance::Relative(self.eps_rel.unwrap_or(crate::estimator::DEFAULT_EPSILON_REL)),
            max_rank: self.max_rank,
            ..Default::default()
        }
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        let kind: PriorKind = self.prior.as_deref().unwrap_or("one").parse()?;
        PriorSpec::from_kind(kind)
    }

    pub fn folds(&self) -> usize {
        self.folds.unwrap_or(DEFAULT_FOLDS)
    }
}

/// Output file handling shared by subcommands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputOpts {
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output file.
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    /// CSV sample of the reference measure P.
    #[arg(long)]
    pub p: Option<PathBuf>,
    /// CSV sample of the target measure Q.
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Columns to use (default: all).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub columns: Option<Vec<String>>,
    /// Seed for cross-validation folds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TestArgs {
    /// Saved model from `kdm fit`; alternatively give --p and --q.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<PathBuf>,
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub columns: Option<Vec<String>>,
    /// Eigenvalue truncation rule: relative or explained.
    #[arg(long)]
    pub truncation: Option<String>,
    /// Truncation threshold.
    #[arg(long)]
    pub t: Option<f64>,
    /// Confidence parameter of the finite-sample bound check.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CondexpArgs {
    /// Joint CSV sample of (X, Y).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Columns forming X.
    #[arg(long = "x-cols", value_delimiter = ',', num_args = 1..)]
    pub x_cols: Option<Vec<String>>,
    /// Columns forming Y.
    #[arg(long = "y-cols", value_delimiter = ',', num_args = 1..)]
    pub y_cols: Option<Vec<String>>,
    /// CSV of query points with the X columns (default: the training X rows).
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Product-sample construction: shifted or threesplit.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Maximum size of the auxiliary Y grid.
    #[arg(long = "grid-cap")]
    pub grid_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    /// Distribution name, or `mixture` for the 4-dimensional Gaussian mixture.
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Shape constant (distribution-specific default).
    #[arg(long)]
    pub c: Option<f64>,
    /// Mixture components.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreArgs {
    /// energy, r2, r2-2 or ds.
    #[arg(long)]
    pub metric: Option<String>,
    /// KDM predictions (mean_*/cov_* columns, or ensemble weights for energy).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Baseline predictions in the same layout.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Realized outcomes, one row per forecast.
    #[arg(long)]
    pub realized: Option<PathBuf>,
    /// Ensemble members for the energy score, one row each.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchArgs {
    /// Distributions to study (default: all eight).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub dists: Option<Vec<String>>,
    /// Sample sizes per measure; each dataset has 3n rows.
    #[arg(long = "sizes", value_delimiter = ',', num_args = 1..)]
    pub sizes: Option<Vec<usize>>,
    /// Replications per cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Significance level.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub truncation: Option<String>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputOpts,
}

// ---------------------------------------------------------------------------
// ingestion

/// Column names and selected values of a CSV file.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Dataset,
}

/// Reads the selected columns (all when `None`) of a headed CSV file.
/// Diagnostics name the 1-based data row and the column header.
pub fn read_csv(path: &Path, columns: Option<&[String]>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let selected: Vec<usize> = match columns {
        None => (0..header.len()).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| KdmError::invalid(format!("{}: no column named {name:?}", path.display())))
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(KdmError::invalid(format!("{}: empty column selection", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for &c in &selected {
            let column = header[c].clone();
            let cell = record.get(c).ok_or_else(|| KdmError::Parse {
                row,
                column: column.clone(),
                message: "missing cell".into(),
            })?;
            let v: f64 = cell.parse().map_err(|_| KdmError::Parse {
                row,
                column: column.clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(KdmError::Parse {
                    row,
                    column,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(KdmError::invalid(format!("{}: no data rows", path.display())));
    }
    Ok(Table {
        columns: selected.iter().map(|&c| header[c].clone()).collect(),
        data: Dataset::new(rows, selected.len(), values)?,
    })
}

/// Writes a headed CSV with shortest round-trip number formatting.
pub fn write_csv<W: Write>(out: W, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone()
        .ok_or_else(|| usage(format!("missing required option --{flag}")))
}

/// Overlays explicitly given flags on top of the `--config` file.
pub fn merge_config<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut base: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    let Value::Object(map) = &mut base else {
        return Err(usage("config file must hold a JSON object"));
    };
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !(v.is_null() || v == Value::Bool(false)) {
                map.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Destination of a command's main artifact.
struct Sink {
    path: Option<PathBuf>,
}

impl Sink {
    fn new(output: &OutputOpts, inputs: &[&Option<PathBuf>]) -> CliResult<Self> {
        if let Some(out) = &output.out {
            for input in inputs.iter().copied().flatten() {
                if same_file(out, input) {
                    return Err(usage(format!("output {} would overwrite an input file", out.display())));
                }
            }
            if out.exists() && !output.force {
                return Err(usage(format!("{} exists; pass --force to overwrite", out.display())));
            }
        }
        Ok(Sink {
            path: output.out.clone(),
        })
    }

    fn write(&self, bytes: &[u8]) -> CliResult<()> {
        match &self.path {
            Some(p) => std::fs::write(p, bytes)?,
            None => std::io::stdout().write_all(bytes)?,
        }
        Ok(())
    }

    fn meta(&self, command: &str, seed: Option<u64>, config: &Value, started: Instant) -> CliResult<()> {
        let Some(p) = &self.path else { return Ok(()) };
        let mut name = p.as_os_str().to_owned();
        name.push(".meta.json");
        let meta = json!({
            "command": command,
            "version": VERSION,
            "seed": seed,
            "config": config,
            "wall_time_seconds": started.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
        });
        std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn json_artifact(command: &str, seed: Option<u64>, config: &Value, body: Value) -> CliResult<Vec<u8>> {
    let mut doc = json!({
        "command": command,
        "version": VERSION,
        "seed": seed,
        "config": config,
    });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    Ok((serde_json::to_string_pretty(&doc)? + "\n").into_bytes())
}

/// Loads P and Q samples and applies a joint standardization if requested.
fn load_pair(p: &Path, q: &Path, columns: Option<&[String]>, standardize: bool) -> Result<(Dataset, Dataset)> {
    let tp = read_csv(p, columns)?;
    let tq = read_csv(q, columns)?;
    if tp.columns != tq.columns {
        return Err(KdmError::invalid(format!(
            "P and Q column sets differ: {:?} vs {:?}",
            tp.columns, tq.columns
        )));
    }
    if !standardize {
        return Ok((tp.data, tq.data));
    }
    let t = Standardization::fit(&[&tp.data, &tq.data])?;
    Ok((tp.data.standardized(&t)?, tq.data.standardized(&t)?))
}

fn fit_with_grid(
    p: &Dataset,
    q: &Dataset,
    model: &ModelOpts,
    seed: Option<u64>,
) -> CliResult<(KdmModel, Option<crate::estimator::CvReport>)> {
    let grid = model.grid()?;
    let prior = model.prior()?;
    let options = model.fit_options();
    if grid.len() == 1 {
        let (k, l) = grid[0];
        return Ok((fit(p, q, &k, l, &prior, &options)?, None));
    }
    let seed = seed.ok_or_else(|| usage("cross-validation over a grid needs --seed"))?;
    let cv = cross_validate(p, q, &grid, model.folds(), &prior, &options, seed)?;
    log::info!(
        "cross-validation picked {:?}, lambda {}",
        cv.best_kernel,
        cv.best_lambda
    );
    let m = fit(p, q, &cv.best_kernel, cv.best_lambda, &prior, &options)?;
    Ok((m, Some(cv)))
}

fn model_summary(m: &KdmModel) -> Value {
    json!({
        "rank": m.rank(),
        "n": m.n,
        "dim": m.dim(),
        "kernel": m.kernel,
        "lambda": m.lambda,
        "h_norm": m.h_norm(),
        "residual_trace": m.residual_trace,
        "epsilon": m.epsilon,
        "rank_capped": m.rank_capped,
        "kappa_inf": m.kappa_inf,
    })
}

/// Reads a model from a `kdm fit` artifact or a bare model bundle.
pub fn load_model_artifact(path: &Path) -> Result<KdmModel> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let bundle = match v.get("model") {
        Some(m) => m.clone(),
        None => v,
    };
    serde_json::from_value::<ModelBundle>(bundle)?.into_model()
}

fn parse_truncation(rule: Option<&str>, t: Option<f64>) -> CliResult<Truncation> {
    match rule.unwrap_or("relative") {
        "relative" => Ok(Truncation::Relative(t.unwrap_or(DEFAULT_RELATIVE_T))),
        "explained" | "explained-variation" => Ok(Truncation::ExplainedVariation(t.unwrap_or(0.99))),
        other => Err(usage(format!("unknown truncation rule {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_fit(flags: &FitArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let p = required(&a.p, "p")?;
    let q = required(&a.q, "q")?;
    if a.output.out.is_none() {
        return Err(usage("missing required option --out"));
    }
    let sink = Sink::new(&flags.output, &[&a.p, &a.q])?;
    let (sp, sq) = load_pair(&p, &q, a.columns.as_deref(), a.model.standardize)?;
    let (model, cv) = fit_with_grid(&sp, &sq, &a.model, a.seed)?;
    let body = json!({
        "summary": model_summary(&model),
        "cv": cv,
        "model": ModelBundle::from(&model),
    });
    sink.write(&json_artifact("fit", a.seed, &config, body)?)?;
    sink.meta("fit", a.seed, &config, started)
}

fn cmd_test(flags: &TestArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let sink = Sink::new(&flags.output, &[&a.model_file, &a.p, &a.q])?;
    let model = match (&a.model_file, &a.p, &a.q) {
        (Some(path), _, _) => load_model_artifact(path)?,
        (None, Some(p), Some(q)) => {
            let (sp, sq) = load_pair(p, q, a.columns.as_deref(), a.model.standardize)?;
            fit_with_grid(&sp, &sq, &a.model, a.seed)?.0
        }
        _ => return Err(usage("give --model-file, or both --p and --q")),
    };
    let truncation = parse_truncation(a.truncation.as_deref(), a.t)?;
    let result = run_test(&model, truncation, a.eta)?;
    let body = json!({ "summary": model_summary(&model), "result": result });
    sink.write(&json_artifact("test", a.seed, &config, body)?)?;
    sink.meta("test", a.seed, &config, started)
}

fn cmd_condexp(flags: &CondexpArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let data = required(&a.data, "data")?;
    let x_cols = required(&a.x_cols, "x-cols")?;
    let y_cols = required(&a.y_cols, "y-cols")?;
    let seed = required(&a.seed, "seed")?;
    let sink = Sink::new(&flags.output, &[&a.data, &a.query])?;
    let x = read_csv(&data, Some(&x_cols))?;
    let y = read_csv(&data, Some(&y_cols))?;
    let joint = JointDataset::new(x.data.clone(), y.data)?;
    let scheme: SplitScheme = a.scheme.as_deref().unwrap_or("shifted").parse()?;
    let cond = ConditionalOptions {
        scheme,
        grid_cap: a.grid_cap.unwrap_or(DEFAULT_GRID_CAP),
        standardize: a.model.standardize,
        seed,
    };
    let grid = a.model.grid()?;
    let options = a.model.fit_options();
    let model = if grid.len() == 1 {
        ConditionalModel::fit(&joint, &grid[0].0, grid[0].1, &options, &cond)?
    } else {
        ConditionalModel::fit_cv(&joint, &grid, a.model.folds(), &options, &cond)?.0
    };
    let queries = match &a.query {
        Some(path) => read_csv(path, Some(&x_cols))?.data,
        None => x.data,
    };
    let moments = model.conditional_moments_batch(&queries)?;
    let dy = y_cols.len();
    let mut header = x_cols.clone();
    header.extend(y_cols.iter().map(|c| format!("mean_{c}")));
    for i in &y_cols {
        for j in &y_cols {
            header.push(format!("cov_{i}_{j}"));
        }
    }
    header.push("degenerate".into());
    let rows = queries.rows().zip(&moments).map(|(q, m)| {
        let mut r = q.to_vec();
        r.extend(&m.mean);
        for i in 0..dy {
            for j in 0..dy {
                r.push(m.covariance[(i, j)]);
            }
        }
        r.push(if m.degenerate { 1.0 } else { 0.0 });
        r
    });
    let mut buf = Vec::new();
    write_csv(&mut buf, &header, rows)?;
    sink.write(&buf)?;
    sink.meta("condexp", Some(seed), &config, started)
}

fn cmd_simulate(flags: &SimulateArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let seed = required(&a.seed, "seed")?;
    let n = required(&a.n, "n")?;
    let dist = required(&a.dist, "dist")?;
    let sink = Sink::new(&flags.output, &[])?;
    let (header, joint) = if dist.eq_ignore_ascii_case("mixture") {
        let cfg = MixtureConfig {
            clusters: a.clusters.unwrap_or(1),
            ..Default::default()
        };
        let h = ["x1", "x2", "y1", "y2"].map(String::from).to_vec();
        (h, sample_gaussian_mixture(&cfg, n, seed)?)
    } else {
        let d: Distribution2d = dist.parse().map_err(|e: KdmError| usage(e.to_string()))?;
        let c = a.c.unwrap_or(d.default_c());
        (vec!["x".into(), "y".into()], sample_distribution(d, n, c, seed)?)
    };
    let rows = joint.x.rows().zip(joint.y.rows()).map(|(x, y)| [x, y].concat());
    let mut buf = Vec::new();
    write_csv(&mut buf, &header, rows)?;
    sink.write(&buf)?;
    sink.meta("simulate", Some(seed), &config, started)
}

/// Forecast records from `mean_*` / `cov_*` columns and realized rows.
fn read_forecasts(pred: &Path, realized: &Dataset, with_cov: bool) -> Result<Vec<ForecastRecord>> {
    let all = read_csv(pred, None)?;
    let pick = |prefix: &str| -> Vec<usize> {
        all.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let means = pick("mean_");
    let covs = pick("cov_");
    let d = realized.dim();
    if means.len() != d {
        return Err(KdmError::invalid(format!(
            "{}: expected {d} mean_ columns, found {}",
            pred.display(),
            means.len()
        )));
    }
    if with_cov && covs.len() != d * d {
        return Err(KdmError::invalid(format!(
            "{}: expected {} cov_ columns, found {}",
            pred.display(),
            d * d,
            covs.len()
        )));
    }
    if all.data.len() != realized.len() {
        return Err(KdmError::invalid(format!(
            "{} has {} rows but there are {} realized outcomes",
            pred.display(),
            all.data.len(),
            realized.len()
        )));
    }
    all.data
        .rows()
        .zip(realized.rows())
        .map(|(row, y)| {
            let mu = DVector::from_iterator(d, means.iter().map(|&i| row[i]));
            let cov = if with_cov {
                DMatrix::from_row_iterator(d, d, covs.iter().map(|&i| row[i]))
            } else {
                DMatrix::identity(d, d)
            };
            ForecastRecord::new(DVector::from_column_slice(y), mu, cov)
        })
        .collect()
}

fn cmd_score(flags: &ScoreArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let metric = required(&a.metric, "metric")?;
    let pred = required(&a.pred, "pred")?;
    let base = required(&a.baseline, "baseline")?;
    let realized = read_csv(&required(&a.realized, "realized")?, None)?.data;
    let sink = Sink::new(&flags.output, &[&a.pred, &a.baseline, &a.realized, &a.ensemble])?;
    let body = match metric.as_str() {
        "energy" => {
            let ens = read_csv(&required(&a.ensemble, "ensemble")?, None)?.data;
            let wk = read_csv(&pred, None)?.data;
            let wb = read_csv(&base, None)?.data;
            if wk.len() != realized.len() || wb.len() != realized.len() {
                return Err(usage("weight files and realized outcomes must have equal row counts"));
            }
            let dist = pairwise_distances(&ens);
            let score = |w: &Dataset| -> Result<Vec<f64>> {
                realized
                    .rows()
                    .zip(w.rows())
                    .map(|(y, wr)| energy_score_with(y, &ens, wr, &dist))
                    .collect()
            };
            let sk = score(&wk)?;
            let sb = score(&wb)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            json!({
                "metric": "energy",
                "value": energy_score_differential(&sb, &sk)?,
                "kdm_mean_score": mean(&sk),
                "baseline_mean_score": mean(&sb),
                "records": realized.len(),
            })
        }
        "r2" => {
            let k = read_forecasts(&pred, &realized, false)?;
            let b = read_forecasts(&base, &realized, false)?;
            let bm: Vec<_> = b.into_iter().map(|r| r.predicted_mean).collect();
            json!({"metric": "r2", "value": r2_oos(&k, &bm)?, "records": k.len()})
        }
        "r2-2" => {
            let k = read_forecasts(&pred, &realized, true)?;
            let b = read_forecasts(&base, &realized, true)?;
            json!({"metric": "r2-2", "value": r2_second_moment(&k, &b)?, "records": k.len()})
        }
        "ds" => {
            let k = read_forecasts(&pred, &realized, true)?;
            let b = read_forecasts(&base, &realized, true)?;
            let sk = k
                .iter()
                .map(|r| dawid_sebastiani(&r.realized, &r.predicted_mean, &r.predicted_cov))
                .collect::<Result<Vec<_>>>()?;
            let excess = crate::metrics::excess_scoring_loss(&k, &b)?;
            json!({
                "metric": "ds",
                "value": excess,
                "kdm_mean_score": sk.iter().sum::<f64>() / sk.len() as f64,
                "records": k.len(),
            })
        }
        other => return Err(usage(format!("unknown metric {other:?}; use energy, r2, r2-2 or ds"))),
    };
    sink.write(&json_artifact("score", None, &config, body)?)?;
    sink.meta("score", None, &config, started)
}

/// Rejection summary for one (distribution, n) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub dist: String,
    pub n: usize,
    pub reps: usize,
    pub rejection_rate: f64,
    pub mean_ell: f64,
    pub p_values: Vec<f64>,
}

/// One replication of the independence test: `3n` rows, three-way split.
/// A grid with more than one entry is cross-validated on each replication.
#[allow(clippy::too_many_arguments)]
pub fn independence_replication(
    dist: Distribution2d,
    c: f64,
    n: usize,
    grid: &[(KernelSpec, f64)],
    folds: usize,
    options: &FitOptions,
    standardize: bool,
    truncation: Truncation,
    seed: u64,
) -> Result<crate::hypothesis::TestResult> {
    let joint = sample_distribution(dist, 3 * n, c, seed)?;
    let (mut p, mut q) = crate::conditional::split_joint_sample(&joint, SplitScheme::ThreeSplit)?;
    if standardize {
        let t = Standardization::fit(&[&p, &q])?;
        p = p.standardized(&t)?;
        q = q.standardized(&t)?;
    }
    let prior = PriorSpec::one();
    let (kernel, lambda) = match grid {
        [] => return Err(KdmError::invalid("empty kernel grid")),
        [only] => *only,
        _ => {
            let cv = cross_validate(&p, &q, grid, folds, &prior, options, derive_seed(seed, &[1]))?;
            (cv.best_kernel, cv.best_lambda)
        }
    };
    let model = fit(&p, &q, &kernel, lambda, &prior, options)?;
    run_test(&model, truncation, None)
}

fn cmd_bench_independence(flags: &BenchArgs) -> CliResult<()> {
    let started = Instant::now();
    let a = merge_config(flags, flags.output.config.as_deref())?;
    let config = serde_json::to_value(&a)?;
    let seed = required(&a.seed, "seed")?;
    let sink = Sink::new(&flags.output, &[])?;
    let dists: Vec<Distribution2d> = match &a.dists {
        Some(names) => names
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()
            .map_err(|e| usage(e.to_string()))?,
        None => Distribution2d::ALL.to_vec(),
    };
    let sizes = a.sizes.clone().unwrap_or_else(|| vec![500, 1500]);
    let reps = a.reps.unwrap_or(100);
    let level = a.level.unwrap_or(0.05);
    if reps == 0 || !(0.0..1.0).contains(&level) {
        return Err(usage("need reps ≥ 1 and level in (0, 1)"));
    }
    let grid = a.model.grid()?;
    let folds = a.model.folds();
    let truncation = parse_truncation(a.truncation.as_deref(), a.t)?;
    let options = a.model.fit_options();
    let mut cells = Vec::new();
    for (di, &dist) in dists.iter().enumerate() {
        for &n in &sizes {
            let results: Vec<_> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = derive_seed(seed, &[di as u64, n as u64, r as u64]);
                    independence_replication(
                        dist,
                        dist.default_c(),
                        n,
                        &grid,
                        folds,
                        &options,
                        a.model.standardize,
                        truncation,
                        s,
                    )
                })
                .collect::<Result<_>>()?;
            let p_values: Vec<f64> = results.iter().map(|t| t.p_value).collect();
            let rate = p_values.iter().filter(|&&p| p < level).count() as f64 / reps as f64;
            let mean_ell = results.iter().map(|t| t.ell as f64).sum::<f64>() / reps as f64;
            log::info!("{dist} n={n}: rejection rate {rate:.3} over {reps} replications");
            cells.push(BenchCell {
                dist: dist.to_string(),
                n,
                reps,
                rejection_rate: rate,
                mean_ell,
                p_values,
            });
        }
    }
    let mut table = format!("{:<18}{:>8}{:>12}\n", "distribution", "n", "rejection");
    for c in &cells {
        table.push_str(&format!("{:<18}{:>8}{:>12.3}\n", c.dist, c.n, c.rejection_rate));
    }
    eprint!("{table}");
    let body = json!({ "level": level, "cells": cells });
    sink.write(&json_artifact("bench independence", Some(seed), &config, body)?)?;
    sink.meta("bench independence", Some(seed), &config, started)
}

/// Applies `KDM_THREADS` to the global thread pool.
pub fn configure_threads() {
    if let Some(n) = std::env::var("KDM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Test(a) => cmd_test(a),
        Command::Condexp(a) => cmd_condexp(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Score(a) => cmd_score(a),
        Command::Bench(BenchCommand::Independence(a)) => cmd_bench_independence(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
