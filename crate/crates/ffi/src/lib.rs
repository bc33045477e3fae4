//! C interface to the folddiff estimators.
//!
//! Datasets and results are opaque handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns an
//! [`FdStatus`]; on failure the message is available from
//! [`fd_last_error_message`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use folddiff::adjusted::{Method, TmleMode};
use folddiff::centering::CenteringSpec;
use folddiff::data::{load_dataset, Dataset, IngestSchema};
use folddiff::pipeline::{estimate, Estimand, EstimateOptions, EstimateResult};
use folddiff::report::ResultsDocument;
use folddiff::Error;
use ndarray::Array2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    DataError = 4,
    IoError = 5,
    NumericalError = 6,
    Panic = 7,
}

pub const FD_ESTIMAND_PSI1: i32 = 0;
pub const FD_ESTIMAND_PSI1G: i32 = 1;
pub const FD_ESTIMAND_PSI2: i32 = 2;
pub const FD_ESTIMAND_PSI2G: i32 = 3;

/// Default method for the estimand: tmle for adjusted, plugin for unadjusted.
pub const FD_METHOD_DEFAULT: i32 = 0;
pub const FD_METHOD_PLUGIN: i32 = 1;
pub const FD_METHOD_ONESTEP: i32 = 2;
pub const FD_METHOD_TMLE: i32 = 3;

pub const FD_TMLE_TWO_STAGE: i32 = 0;
pub const FD_TMLE_SINGLE_STAGE: i32 = 1;

/// Default centering for the estimand: smoothed median when centered, none otherwise.
pub const FD_CENTER_DEFAULT: i32 = 0;
pub const FD_CENTER_NONE: i32 = 1;
pub const FD_CENTER_MEAN: i32 = 2;
pub const FD_CENTER_REFERENCE: i32 = 3;
pub const FD_CENTER_SMEDIAN: i32 = 4;

/// Estimation settings; obtain defaults from [`fd_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// One of the `FD_ESTIMAND_*` values.
    pub estimand: i32,
    /// One of the `FD_METHOD_*` values.
    pub method: i32,
    /// One of the `FD_TMLE_*` values.
    pub tmle_mode: i32,
    /// One of the `FD_CENTER_*` values.
    pub centering: i32,
    /// Zero-based reference category for `FD_CENTER_REFERENCE`.
    pub reference: usize,
    /// Scale of the smoothed median for `FD_CENTER_SMEDIAN`.
    pub smedian_eps: f64,
    pub k: usize,
    pub v: usize,
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Opaque dataset handle.
pub struct FdDataset(Dataset);

/// Opaque estimation result handle.
pub struct FdEstimate(EstimateResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FdStatus {
    match e {
        Error::Config(_) => FdStatus::ConfigError,
        Error::InvalidArgument(_) => FdStatus::InvalidArgument,
        Error::Data(_) => FdStatus::DataError,
        Error::File { .. } | Error::Io(_) => FdStatus::IoError,
        Error::Numerical(_) => FdStatus::NumericalError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FdStatus, String)>) -> FdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FdStatus, String) {
    (FdStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (FdStatus, String) {
    (FdStatus::InvalidArgument, msg)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn fd_options_default() -> FdOptions {
    let d = EstimateOptions::default();
    FdOptions {
        estimand: FD_ESTIMAND_PSI2G,
        method: FD_METHOD_DEFAULT,
        tmle_mode: FD_TMLE_TWO_STAGE,
        centering: FD_CENTER_DEFAULT,
        reference: 0,
        smedian_eps: folddiff::centering::DEFAULT_SMEDIAN_EPS,
        k: d.k,
        v: d.v,
        b: d.b,
        alpha: d.alpha,
        seed: d.seed,
    }
}

fn convert_options(o: &FdOptions) -> Result<EstimateOptions, (FdStatus, String)> {
    let estimand = match o.estimand {
        FD_ESTIMAND_PSI1 => Estimand::Psi1,
        FD_ESTIMAND_PSI1G => Estimand::Psi1g,
        FD_ESTIMAND_PSI2 => Estimand::Psi2,
        FD_ESTIMAND_PSI2G => Estimand::Psi2g,
        v => return Err(invalid(format!("unknown estimand code {v}"))),
    };
    let method = match o.method {
        FD_METHOD_DEFAULT => None,
        FD_METHOD_PLUGIN => Some(Method::Plugin),
        FD_METHOD_ONESTEP => Some(Method::Onestep),
        FD_METHOD_TMLE => Some(Method::Tmle),
        v => return Err(invalid(format!("unknown method code {v}"))),
    };
    let tmle_mode = match o.tmle_mode {
        FD_TMLE_TWO_STAGE => TmleMode::TwoStage,
        FD_TMLE_SINGLE_STAGE => TmleMode::SingleStage,
        v => return Err(invalid(format!("unknown tmle mode code {v}"))),
    };
    let centering = match o.centering {
        FD_CENTER_DEFAULT => None,
        FD_CENTER_NONE => Some(CenteringSpec::None),
        FD_CENTER_MEAN => Some(CenteringSpec::Mean),
        FD_CENTER_REFERENCE => Some(CenteringSpec::Reference { index: o.reference }),
        FD_CENTER_SMEDIAN => Some(CenteringSpec::SmoothedMedian { eps: o.smedian_eps }),
        v => return Err(invalid(format!("unknown centering code {v}"))),
    };
    let opts = EstimateOptions {
        estimand,
        method,
        tmle_mode,
        centering,
        k: o.k,
        v: o.v,
        b: o.b,
        alpha: o.alpha,
        seed: o.seed,
        ..EstimateOptions::default()
    };
    opts.validate().map_err(lib_err)?;
    Ok(opts)
}

/// Builds a dataset from row-major arrays: `w` is `n x j` outcomes, `a` is
/// `n` exposures (0 or 1) and `x` is `n x p` covariates (may be null when `p == 0`).
///
/// # Safety
/// The pointers must reference arrays of the stated sizes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_new(
    w: *const f64,
    a: *const u8,
    x: *const f64,
    n: usize,
    j: usize,
    p: usize,
    out: *mut *mut FdDataset,
) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if w.is_null() || a.is_null() || (x.is_null() && p > 0) {
            return Err(null("input array"));
        }
        let nw = n.checked_mul(j).ok_or_else(|| invalid("n * j overflows".into()))?;
        let nx = n.checked_mul(p).ok_or_else(|| invalid("n * p overflows".into()))?;
        let w = Array2::from_shape_vec((n, j), std::slice::from_raw_parts(w, nw).to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        let a = std::slice::from_raw_parts(a, n).to_vec();
        let xs = if p == 0 { Vec::new() } else { std::slice::from_raw_parts(x, nx).to_vec() };
        let x = Array2::from_shape_vec((n, p), xs).map_err(|e| invalid(e.to_string()))?;
        let d = Dataset::new(w, a, x).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FdDataset(d)));
        Ok(())
    })
}

/// Loads a dataset from an outcome table and a metadata table.
/// `covariates` is a comma-separated list of metadata columns and may be null.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_load(
    counts_path: *const c_char,
    meta_path: *const c_char,
    exposure: *const c_char,
    covariates: *const c_char,
    out: *mut *mut FdDataset,
) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let counts = str_arg(counts_path, "counts_path")?;
        let meta = str_arg(meta_path, "meta_path")?;
        let exposure = str_arg(exposure, "exposure")?;
        let covs = if covariates.is_null() { "" } else { str_arg(covariates, "covariates")? };
        let covs = covs.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
        let d = load_dataset(Path::new(counts), Path::new(meta), &IngestSchema::new(exposure, covs))
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FdDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle from `fd_dataset_new`/`fd_dataset_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_free(d: *mut FdDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_n(d: *const FdDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.n())
}

/// Number of categories, or 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fd_dataset_n_categories(d: *const FdDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.n_categories())
}

/// Runs estimation; `opts` may be null for defaults.
///
/// # Safety
/// `d` must be a live dataset handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate(d: *const FdDataset, opts: *const FdOptions, out: *mut *mut FdEstimate) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let d = d.as_ref().ok_or_else(|| null("dataset"))?;
        let o = opts.as_ref().copied().unwrap_or_else(|| fd_options_default());
        let opts = convert_options(&o)?;
        let r = estimate(&d.0, &opts).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FdEstimate(r)));
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a handle from `fd_estimate` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_free(e: *mut FdEstimate) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Number of categories in the result, or 0 for a null handle.
///
/// # Safety
/// `e` must be null or a live result handle.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_len(e: *const FdEstimate) -> usize {
    e.as_ref().map_or(0, |e| e.0.estimate.len())
}

/// Copies per-category results into caller buffers of length `len`, which
/// must equal `fd_estimate_len`. Any output pointer may be null to skip it.
/// Non-estimable categories hold NaN.
///
/// # Safety
/// Non-null buffers must hold at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_values(
    e: *const FdEstimate,
    len: usize,
    estimate: *mut f64,
    se: *mut f64,
    ci_lower: *mut f64,
    ci_upper: *mut f64,
    sim_lower: *mut f64,
    sim_upper: *mut f64,
    p_value: *mut f64,
) -> FdStatus {
    guard(|| {
        let r = &e.as_ref().ok_or_else(|| null("result"))?.0;
        if len != r.estimate.len() {
            return Err(invalid(format!("buffer length {len} does not match {} categories", r.estimate.len())));
        }
        let copy = |dst: *mut f64, f: &dyn Fn(usize) -> f64| {
            if !dst.is_null() {
                let dst = std::slice::from_raw_parts_mut(dst, len);
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = f(j);
                }
            }
        };
        copy(estimate, &|j| r.estimate[j]);
        copy(se, &|j| r.se[j]);
        copy(ci_lower, &|j| r.ci_marginal[[j, 0]]);
        copy(ci_upper, &|j| r.ci_marginal[[j, 1]]);
        copy(sim_lower, &|j| r.ci_simultaneous[[j, 0]]);
        copy(sim_upper, &|j| r.ci_simultaneous[[j, 1]]);
        copy(p_value, &|j| r.p_values[j]);
        Ok(())
    })
}

/// Writes 1 for estimable categories and 0 otherwise.
///
/// # Safety
/// `out` must hold at least `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_estimable(e: *const FdEstimate, len: usize, out: *mut u8) -> FdStatus {
    guard(|| {
        let r = &e.as_ref().ok_or_else(|| null("result"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != r.estimable.len() {
            return Err(invalid(format!("buffer length {len} does not match {} categories", r.estimable.len())));
        }
        for (dst, &ok) in std::slice::from_raw_parts_mut(out, len).iter_mut().zip(&r.estimable) {
            *dst = u8::from(ok);
        }
        Ok(())
    })
}

/// Simultaneous critical value, or NaN for a null handle.
///
/// # Safety
/// `e` must be null or a live result handle.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_crit_simultaneous(e: *const FdEstimate) -> f64 {
    e.as_ref().map_or(f64::NAN, |e| e.0.crit_simultaneous)
}

/// Serializes the result table as JSON into a new string released with `fd_string_free`.
///
/// # Safety
/// `e` must be a live result handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_estimate_to_json(e: *const FdEstimate, out: *mut *mut c_char) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let r = &e.as_ref().ok_or_else(|| null("result"))?.0;
        let text = serde_json::to_string(&ResultsDocument::from_result(r))
            .map_err(|e| (FdStatus::IoError, e.to_string()))?;
        *out = CString::new(text).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
