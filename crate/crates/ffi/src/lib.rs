//! C ABI over the `kdm` crate.
//!
//! Every entry point returns a [`KdmStatus`]; on failure a description is
//! available from [`kdm_last_error_message`] until the next failing call on
//! the same thread. Models and test results are opaque heap handles owned by
//! the caller and released with the matching `*_free` function. Panics never
//! cross the boundary; they surface as [`KdmStatus::Panic`].
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kdm::error::KdmError;
use kdm::estimator::{fit, FitOptions, KdmModel, PriorSpec, Tolerance};
use kdm::hypothesis::{run_test, TestResult, Truncation};
use kdm::kernels::{KernelFamily, KernelSpec};
use kdm::Dataset;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdmKernelFamily {
    Gaussian = 0,
    Laplace = 1,
    Polynomial = 2,
}

/// Kernel family and hyperparameters; unused fields are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KdmKernel {
    pub family: KdmKernelFamily,
    pub rho: f64,
    pub c: f64,
    pub q: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdmPrior {
    Zero = 0,
    One = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdmTruncationRule {
    Relative = 0,
    ExplainedVariation = 1,
}

/// Opaque fitted model.
pub struct KdmModelHandle {
    inner: KdmModel,
}

/// Opaque test outcome.
pub struct KdmTestResultHandle {
    inner: TestResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &KdmError) -> KdmStatus {
    match e {
        KdmError::DimensionMismatch { .. } => KdmStatus::DimensionMismatch,
        KdmError::Io(_) => KdmStatus::Io,
        e if e.is_numeric() => KdmStatus::Numeric,
        _ => KdmStatus::InvalidArgument,
    }
}

struct Failure(KdmStatus, String);

impl From<KdmError> for Failure {
    fn from(e: KdmError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(KdmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, translating errors and panics into status codes.
fn guard<F>(body: F) -> KdmStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => KdmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KdmStatus::Panic
        }
    }
}

unsafe fn matrix<'a>(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(KdmStatus::InvalidArgument, format!("{what} is too large")))?;
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn model_ref<'a>(model: *const KdmModelHandle) -> Result<&'a KdmModel, Failure> {
    model.as_ref().map(|h| &h.inner).ok_or_else(|| null("model"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(KdmStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

impl From<KdmKernel> for KernelSpec {
    fn from(k: KdmKernel) -> Self {
        let family = match k.family {
            KdmKernelFamily::Gaussian => KernelFamily::Gaussian,
            KdmKernelFamily::Laplace => KernelFamily::Laplace,
            KdmKernelFamily::Polynomial => KernelFamily::Polynomial,
        };
        KernelSpec {
            family,
            rho: k.rho,
            c: k.c,
            q: k.q,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kdm_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kdm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fits a model from row-major `n × d` samples `p` (reference) and `q`
/// (target). `eps_rel` is the decomposition tolerance relative to the
/// kernel-matrix trace.
#[no_mangle]
pub unsafe extern "C" fn kdm_fit(
    p: *const f64,
    q: *const f64,
    n: usize,
    d: usize,
    kernel: KdmKernel,
    lambda: f64,
    eps_rel: f64,
    prior: KdmPrior,
    out_model: *mut *mut KdmModelHandle,
) -> KdmStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        *out_model = ptr::null_mut();
        let sp = Dataset::new(n, d, matrix(p, n, d, "p")?.to_vec())?;
        let sq = Dataset::new(n, d, matrix(q, n, d, "q")?.to_vec())?;
        let prior = match prior {
            KdmPrior::Zero => PriorSpec::zero(),
            KdmPrior::One => PriorSpec::one(),
        };
        let options = FitOptions {
            tolerance: Tolerance::Relative(eps_rel),
            ..Default::default()
        };
        let model = fit(&sp, &sq, &kernel.into(), lambda, &prior, &options)?;
        *out_model = Box::into_raw(Box::new(KdmModelHandle { inner: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kdm_model_free(model: *mut KdmModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Rank of the low-rank expansion; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kdm_model_rank(model: *const KdmModelHandle) -> usize {
    model.as_ref().map_or(0, |h| h.inner.rank())
}

/// Input dimension; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kdm_model_dim(model: *const KdmModelHandle) -> usize {
    model.as_ref().map_or(0, |h| h.inner.dim())
}

/// RKHS norm of the fitted `h`.
#[no_mangle]
pub unsafe extern "C" fn kdm_model_h_norm(model: *const KdmModelHandle, out: *mut f64) -> KdmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.h_norm();
        Ok(())
    })
}

/// Evaluates the density ratio at `m` row-major points of dimension `d`,
/// writing `m` values to `out`. With `clip` the values are floored at zero.
#[no_mangle]
pub unsafe extern "C" fn kdm_model_eval(
    model: *const KdmModelHandle,
    z: *const f64,
    m: usize,
    d: usize,
    clip: bool,
    out: *mut f64,
) -> KdmStatus {
    guard(|| {
        let model = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if m == 0 {
            return Ok(());
        }
        let data = Dataset::new(m, d, matrix(z, m, d, "z")?.to_vec())?;
        let values = model.eval_density_ratio_batch(&data, clip)?;
        std::slice::from_raw_parts_mut(out, m).copy_from_slice(&values);
        Ok(())
    })
}

/// Writes the model as JSON to `path` (replacing any existing file).
#[no_mangle]
pub unsafe extern "C" fn kdm_model_save(model: *const KdmModelHandle, path: *const c_char) -> KdmStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.save(path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kdm_model_load(path: *const c_char, out_model: *mut *mut KdmModelHandle) -> KdmStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        *out_model = ptr::null_mut();
        let m = KdmModel::load(path_arg(path)?)?;
        *out_model = Box::into_raw(Box::new(KdmModelHandle { inner: m }));
        Ok(())
    })
}

/// Chi-square test of the model's prior. A non-positive `eta` skips the
/// finite-sample bound check.
#[no_mangle]
pub unsafe extern "C" fn kdm_test(
    model: *const KdmModelHandle,
    rule: KdmTruncationRule,
    t: f64,
    eta: f64,
    out_result: *mut *mut KdmTestResultHandle,
) -> KdmStatus {
    guard(|| {
        if out_result.is_null() {
            return Err(null("out_result"));
        }
        *out_result = ptr::null_mut();
        let m = model_ref(model)?;
        let truncation = match rule {
            KdmTruncationRule::Relative => Truncation::Relative(t),
            KdmTruncationRule::ExplainedVariation => Truncation::ExplainedVariation(t),
        };
        let eta = (eta > 0.0).then_some(eta);
        let r = run_test(m, truncation, eta)?;
        *out_result = Box::into_raw(Box::new(KdmTestResultHandle { inner: r }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kdm_test_result_free(result: *mut KdmTestResultHandle) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Test statistic; NaN for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kdm_test_result_statistic(result: *const KdmTestResultHandle) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.inner.statistic)
}

/// Upper-tail p-value; NaN for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kdm_test_result_p_value(result: *const KdmTestResultHandle) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.inner.p_value)
}

/// Degrees of freedom; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn kdm_test_result_dof(result: *const KdmTestResultHandle) -> usize {
    result.as_ref().map_or(0, |r| r.inner.ell)
}

/// Bound-check outcome: 1 satisfied, 0 violated, -1 not computed or null.
#[no_mangle]
pub unsafe extern "C" fn kdm_test_result_bound_satisfied(result: *const KdmTestResultHandle) -> i32 {
    match result.as_ref().and_then(|r| r.inner.bound_check) {
        Some(b) => i32::from(b.satisfied),
        None => -1,
    }
}
