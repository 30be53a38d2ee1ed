//! C interface to sfmc-core.
//!
//! Every function returns a status code; results go through out-pointers.
//! Matrices cross the boundary as column-major `double` buffers. Handles are
//! opaque and must be released with the matching `_free` function. After a
//! nonzero status, `sfmc_last_error` gives a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sfmc_core::linalg::Mat;
use sfmc_core::oracle::fit_known_rank;
use sfmc_core::pipeline::{fit_auto, variances, EtaPolicy, PipelineConfig};
use sfmc_core::{BFamily, Error, FactorModel, FitConfig, LossSpec, MaskedData, ParamPair, Ranks};

pub const SFMC_OK: c_int = 0;
/// A required pointer argument was null.
pub const SFMC_ERR_NULL: c_int = 1;
pub const SFMC_ERR_INPUT: c_int = 2;
pub const SFMC_ERR_NUMERICAL: c_int = 3;
pub const SFMC_ERR_NONCONVERGENCE: c_int = 4;
/// The library panicked; the handle arguments are left untouched.
pub const SFMC_ERR_PANIC: c_int = 5;

pub const SFMC_LOSS_QUADRATIC: c_int = 0;
/// Uses the `huber_delta` argument.
pub const SFMC_LOSS_HUBER: c_int = 1;
pub const SFMC_LOSS_GAUSSIAN: c_int = 2;
pub const SFMC_LOSS_POISSON: c_int = 3;
pub const SFMC_LOSS_BERNOULLI: c_int = 4;

/// Observed data: values and a 0/1 observation mask.
pub struct SfmcData {
    inner: MaskedData,
}

/// A fitted model with its tuning values.
pub struct SfmcFit {
    data: MaskedData,
    loss: LossSpec,
    model: FactorModel,
    estimate: ParamPair,
    mu: f64,
    eta: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SFMC_OK
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SFMC_ERR_NULL
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {e}", e.code()));
            e.exit_code()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SFMC_ERR_PANIC
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

fn loss_from(kind: c_int, huber_delta: f64) -> Result<LossSpec, Fail> {
    let l = match kind {
        SFMC_LOSS_QUADRATIC => LossSpec::Quadratic,
        SFMC_LOSS_HUBER => LossSpec::Huber(huber_delta),
        SFMC_LOSS_GAUSSIAN => LossSpec::ExpFamily(BFamily::gaussian()),
        SFMC_LOSS_POISSON => LossSpec::ExpFamily(BFamily::poisson()),
        SFMC_LOSS_BERNOULLI => LossSpec::ExpFamily(BFamily::bernoulli()),
        k => return Err(Error::InvalidInput(format!("unknown loss kind {k}")).into()),
    };
    l.validate()?;
    Ok(l)
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sfmc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let s = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = s.len().min(len - 1);
            std::ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        s.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build a data handle from column-major n1 x n2 buffers. Entries of `x`
/// where `w` is 0 are ignored; `w` must be 0 or 1.
///
/// # Safety
/// `x` and `w` must be valid for n1 * n2 reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfmc_data_new(
    n1: usize,
    n2: usize,
    x: *const f64,
    w: *const f64,
    out: *mut *mut SfmcData,
) -> c_int {
    guard(|| {
        nonnull(x, "x")?;
        nonnull(w, "w")?;
        nonnull(out, "out")?;
        let len = n1
            .checked_mul(n2)
            .ok_or_else(|| Error::InvalidInput("n1 * n2 overflows".into()))?;
        let xs = std::slice::from_raw_parts(x, len);
        let ws = std::slice::from_raw_parts(w, len);
        let inner = MaskedData::new(Mat::from_column_slice(n1, n2, xs), Mat::from_column_slice(n1, n2, ws))?;
        *out = Box::into_raw(Box::new(SfmcData { inner }));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle from `sfmc_data_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfmc_data_free(data: *mut SfmcData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Full pipeline: rank selection over the default penalty grid, then the
/// weighted refit. `eta <= 0` selects eta from the data.
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_auto(
    data: *const SfmcData,
    loss_kind: c_int,
    huber_delta: f64,
    eta: f64,
    out: *mut *mut SfmcFit,
) -> c_int {
    guard(|| {
        nonnull(data, "data")?;
        nonnull(out, "out")?;
        let d = &(*data).inner;
        let loss = loss_from(loss_kind, huber_delta)?;
        let cfg = PipelineConfig {
            eta: if eta > 0.0 { EtaPolicy::Fixed(eta) } else { EtaPolicy::Auto },
            ..PipelineConfig::default()
        };
        let fit = fit_auto(d, &loss, &cfg)?;
        *out = Box::into_raw(Box::new(SfmcFit {
            data: d.clone(),
            loss,
            mu: fit.selection.mu,
            eta: fit.eta,
            estimate: fit.estimate,
            model: fit.model,
        }));
        Ok(())
    })
}

/// Fit at known ranks and fixed eta (> 0).
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_known_rank(
    data: *const SfmcData,
    loss_kind: c_int,
    huber_delta: f64,
    d_s: usize,
    d_m: usize,
    d_theta: usize,
    eta: f64,
    out: *mut *mut SfmcFit,
) -> c_int {
    guard(|| {
        nonnull(data, "data")?;
        nonnull(out, "out")?;
        let d = &(*data).inner;
        let loss = loss_from(loss_kind, huber_delta)?;
        let cfg = FitConfig {
            eta,
            ..FitConfig::default()
        };
        let (model, _) = fit_known_rank(d, Ranks::new(d_s, d_m, d_theta), &loss, &cfg, None)?;
        let estimate = model.assemble()?;
        *out = Box::into_raw(Box::new(SfmcFit {
            data: d.clone(),
            loss,
            model,
            estimate,
            mu: f64::NAN,
            eta,
        }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from a fit function not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_free(fit: *mut SfmcFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Selected ranks.
///
/// # Safety
/// `fit` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_ranks(
    fit: *const SfmcFit,
    d_s: *mut usize,
    d_m: *mut usize,
    d_theta: *mut usize,
) -> c_int {
    guard(|| {
        nonnull(fit, "fit")?;
        nonnull(d_s, "d_s")?;
        nonnull(d_m, "d_m")?;
        nonnull(d_theta, "d_theta")?;
        let r = (*fit).model.ranks;
        *d_s = r.d_s;
        *d_m = r.d_m;
        *d_theta = r.d_theta;
        Ok(())
    })
}

/// Penalty level (NaN for known-rank fits) and weight used.
///
/// # Safety
/// `fit` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_tuning(fit: *const SfmcFit, mu: *mut f64, eta: *mut f64) -> c_int {
    guard(|| {
        nonnull(fit, "fit")?;
        nonnull(mu, "mu")?;
        nonnull(eta, "eta")?;
        *mu = (*fit).mu;
        *eta = (*fit).eta;
        Ok(())
    })
}

unsafe fn copy_out(m: &Mat, buf: *mut f64, len: usize) -> Result<(), Fail> {
    nonnull(buf, "buf")?;
    let need = m.nrows() * m.ncols();
    if len < need {
        return Err(Error::InvalidInput(format!("buffer holds {len} values, need {need}")).into());
    }
    std::ptr::copy_nonoverlapping(m.as_slice().as_ptr(), buf, need);
    Ok(())
}

/// Copy the fitted M (column-major) into `buf` of at least n1 * n2 values.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_m(fit: *const SfmcFit, buf: *mut f64, len: usize) -> c_int {
    guard(|| {
        nonnull(fit, "fit")?;
        copy_out(&(*fit).estimate.m, buf, len)
    })
}

/// Copy the fitted Theta (column-major) into `buf`.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_theta(fit: *const SfmcFit, buf: *mut f64, len: usize) -> c_int {
    guard(|| {
        nonnull(fit, "fit")?;
        copy_out(&(*fit).estimate.theta, buf, len)
    })
}

/// Standard errors of the fitted M entries (column-major). Not available for
/// the Huber loss.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sfmc_fit_se_m(fit: *const SfmcFit, buf: *mut f64, len: usize) -> c_int {
    guard(|| {
        nonnull(fit, "fit")?;
        let f = &*fit;
        let v = variances(&f.data, &f.model, &f.loss, f.eta)?;
        let se = Mat::from_fn(v.v_m.nrows(), v.v_m.ncols(), |i, j| v.se_m(i, j));
        copy_out(&se, buf, len)
    })
}
