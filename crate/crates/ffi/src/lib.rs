//! C interface to the `tmpd` crate.
//!
//! Objects are opaque handles created by `tmpd_*_new`-style functions and
//! released with the matching `tmpd_*_free`. Every fallible call returns a
//! `TmpdStatus`; on failure `tmpd_last_error` describes the problem for the
//! calling thread. Matrices are passed row-major.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use tmpd::metrics::{gaussian_w2, sliced_w1, SlicedWassersteinConfig};
use tmpd::prior::{
    generate_mask_measurement, generate_measurement, gmm_build, grf_build, AnyPrior, GaussianPrior, MeasurementModel, Prior,
};
use tmpd::rng::stream;
use tmpd::sampler::{sample, SamplerConfig, SamplerMethod};
use tmpd::schedule::{NoiseLevel, Schedule, SdeKind, VeSchedule, VpSchedule};
use tmpd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmpdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Linalg = 4,
    NonFinite = 5,
    Unsupported = 6,
    Domain = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct TmpdPrior(AnyPrior);
pub struct TmpdMeasurement(MeasurementModel);
/// Row-major sample matrix, one sample per row.
pub struct TmpdSamples {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Sampler settings. `guidance` and `sampler` are strings such as "tmpd",
/// "dtmpd:rowsum", "dps-chung:1.0" and "ddpm-vp". Zero schedule fields
/// select the defaults (beta in [0.1, 20], sigma in [0.01, 50]).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TmpdSamplerOptions {
    pub guidance: *const c_char,
    pub sampler: *const c_char,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TmpdStatus {
    match e {
        Error::Domain { .. } => TmpdStatus::Domain,
        Error::InvalidArgument(_) | Error::Config(_) => TmpdStatus::InvalidArgument,
        Error::Shape(_) => TmpdStatus::Shape,
        Error::Linalg(_) => TmpdStatus::Linalg,
        Error::Unsupported(_) => TmpdStatus::Unsupported,
        Error::NonFinite { .. } => TmpdStatus::NonFinite,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => TmpdStatus::Io,
    }
}

struct Fail(TmpdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TmpdStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(TmpdStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmpdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TmpdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TmpdStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, n) })
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| bad(format!("{what} is not UTF-8")))
}

fn row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn samples_of(m: &DMatrix<f64>) -> TmpdSamples {
    let data = m.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()).collect();
    TmpdSamples { rows: m.nrows(), cols: m.ncols(), data }
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn tmpd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tmpd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// The 25-component Gaussian mixture prior in dimension `d_x` (even, >= 2).
#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_gmm(d_x: usize, out: *mut *mut TmpdPrior) -> TmpdStatus {
    guard(|| unsafe { put(out, TmpdPrior(AnyPrior::Gmm(gmm_build(d_x)?))) })
}

/// Zero-mean Matern-5/2 field on a `grid_side` x `grid_side` grid over [lo, hi]^2.
#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_grf(grid_side: usize, lo: f64, hi: f64, jitter: f64, out: *mut *mut TmpdPrior) -> TmpdStatus {
    guard(|| unsafe { put(out, TmpdPrior(AnyPrior::Gaussian(grf_build(grid_side, (lo, hi), jitter)?))) })
}

/// Gaussian prior N(mean, cov) with `cov` a row-major d x d matrix.
#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_gaussian(d: usize, mean: *const f64, cov: *const f64, out: *mut *mut TmpdPrior) -> TmpdStatus {
    guard(|| unsafe {
        let m = DVector::from_column_slice(slice(mean, d, "mean")?);
        let c = row_major(d, d, slice(cov, d * d, "cov")?);
        put(out, TmpdPrior(AnyPrior::Gaussian(GaussianPrior::new(m, c)?)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_dim(prior: *const TmpdPrior) -> usize {
    unsafe { prior.as_ref() }.map_or(0, |p| p.0.dim())
}

/// Score of the noised marginal at noise level (alpha, v): x_t = sqrt(alpha) x_0 + sqrt(v) z.
#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_score(prior: *const TmpdPrior, alpha: f64, v: f64, x: *const f64, out: *mut f64, len: usize) -> TmpdStatus {
    guard(|| unsafe {
        let p = get(prior, "prior")?;
        if len != p.0.dim() {
            return Err(Fail(TmpdStatus::Shape, format!("len {len} != prior dimension {}", p.0.dim())));
        }
        let level = NoiseLevel::new(alpha, v)?;
        let x = DVector::from_column_slice(slice(x, len, "x")?);
        slice_mut(out, len, "out")?.copy_from_slice(p.0.score(&x, level).as_slice());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_prior_free(prior: *mut TmpdPrior) {
    if !prior.is_null() {
        drop(unsafe { Box::from_raw(prior) });
    }
}

/// y = H x + sigma_y e with `h` row-major d_y x d_x.
#[no_mangle]
pub unsafe extern "C" fn tmpd_measurement_new(
    h: *const f64,
    d_y: usize,
    d_x: usize,
    sigma_y: f64,
    y: *const f64,
    out: *mut *mut TmpdMeasurement,
) -> TmpdStatus {
    guard(|| unsafe {
        let h = row_major(d_y, d_x, slice(h, d_y * d_x, "h")?);
        let y = DVector::from_column_slice(slice(y, d_y, "y")?);
        put(out, TmpdMeasurement(MeasurementModel::new(h, sigma_y, y, None)?))
    })
}

/// Random measurement of a prior draw: a dense operator with uniform singular
/// values, or with `mask` nonzero a random coordinate subset.
#[no_mangle]
pub unsafe extern "C" fn tmpd_measurement_generate(
    prior: *const TmpdPrior,
    d_y: usize,
    sigma_y: f64,
    mask: bool,
    seed: u64,
    out: *mut *mut TmpdMeasurement,
) -> TmpdStatus {
    guard(|| unsafe {
        let p = get(prior, "prior")?;
        let mut rng = stream(seed, &[]);
        let mm = if mask {
            generate_mask_measurement(&p.0, d_y, sigma_y, &mut rng)?
        } else {
            generate_measurement(&p.0, d_y, sigma_y, &mut rng)?
        };
        put(out, TmpdMeasurement(mm))
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_measurement_dims(mm: *const TmpdMeasurement, d_y: *mut usize, d_x: *mut usize) -> TmpdStatus {
    guard(|| unsafe {
        let m = get(mm, "measurement")?;
        if d_y.is_null() || d_x.is_null() {
            return Err(null("output dimension"));
        }
        *d_y = m.0.d_y();
        *d_x = m.0.d_x();
        Ok(())
    })
}

/// Copy the observation vector into `out` (length d_y).
#[no_mangle]
pub unsafe extern "C" fn tmpd_measurement_y(mm: *const TmpdMeasurement, out: *mut f64, len: usize) -> TmpdStatus {
    guard(|| unsafe {
        let m = get(mm, "measurement")?;
        if len != m.0.d_y() {
            return Err(Fail(TmpdStatus::BufferTooSmall, format!("need {} values, got {len}", m.0.d_y())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(m.0.y.as_slice());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_measurement_free(mm: *mut TmpdMeasurement) {
    if !mm.is_null() {
        drop(unsafe { Box::from_raw(mm) });
    }
}

fn or(v: f64, default: f64) -> f64 {
    if v == 0.0 { default } else { v }
}

/// Guided posterior sampling; writes `opts.batch` samples.
#[no_mangle]
pub unsafe extern "C" fn tmpd_sample(
    prior: *const TmpdPrior,
    mm: *const TmpdMeasurement,
    opts: *const TmpdSamplerOptions,
    out: *mut *mut TmpdSamples,
) -> TmpdStatus {
    guard(|| unsafe {
        let p = get(prior, "prior")?;
        let m = get(mm, "measurement")?;
        let o = get(opts, "options")?;
        let guidance = text(o.guidance, "guidance")?.parse()?;
        let method: SamplerMethod = text(o.sampler, "sampler")?.parse()?;
        let schedule = match method.sde() {
            SdeKind::Vp => {
                let d = VpSchedule::default();
                Schedule::Vp(VpSchedule { beta_min: or(o.beta_min, d.beta_min), beta_max: or(o.beta_max, d.beta_max), ..d })
            }
            SdeKind::Ve => {
                let d = VeSchedule::default();
                Schedule::Ve(VeSchedule { sigma_min: or(o.sigma_min, d.sigma_min), sigma_max: or(o.sigma_max, d.sigma_max), ..d })
            }
        };
        schedule.validate()?;
        let cfg = SamplerConfig { method, steps: o.steps, batch: o.batch, seed: o.seed, guidance, diagnostics: false };
        let tr = sample(&p.0, &m.0, &schedule, &cfg)?;
        put(out, samples_of(&tr.samples))
    })
}

/// `n` draws from the exact posterior of `prior` given `mm`.
#[no_mangle]
pub unsafe extern "C" fn tmpd_exact_posterior_sample(
    prior: *const TmpdPrior,
    mm: *const TmpdMeasurement,
    n: usize,
    seed: u64,
    out: *mut *mut TmpdSamples,
) -> TmpdStatus {
    guard(|| unsafe {
        let p = get(prior, "prior")?;
        let m = get(mm, "measurement")?;
        let x = p.0.exact_posterior(&m.0)?.sample(n, &mut stream(seed, &[]))?;
        put(out, samples_of(&x))
    })
}

/// Wrap a row-major `rows` x `cols` buffer (copied).
#[no_mangle]
pub unsafe extern "C" fn tmpd_samples_new(data: *const f64, rows: usize, cols: usize, out: *mut *mut TmpdSamples) -> TmpdStatus {
    guard(|| unsafe {
        let n = rows.checked_mul(cols).ok_or_else(|| bad("rows * cols overflows"))?;
        let data = slice(data, n, "data")?.to_vec();
        put(out, TmpdSamples { rows, cols, data })
    })
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_samples_shape(s: *const TmpdSamples, rows: *mut usize, cols: *mut usize) -> TmpdStatus {
    guard(|| unsafe {
        let s = get(s, "samples")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("output shape"));
        }
        *rows = s.rows;
        *cols = s.cols;
        Ok(())
    })
}

/// Borrowed pointer to the row-major data; valid until `tmpd_samples_free`.
#[no_mangle]
pub unsafe extern "C" fn tmpd_samples_data(s: *const TmpdSamples) -> *const f64 {
    unsafe { s.as_ref() }.map_or(ptr::null(), |s| s.data.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_samples_free(s: *mut TmpdSamples) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

fn matrix(s: &TmpdSamples) -> DMatrix<f64> {
    row_major(s.rows, s.cols, &s.data)
}

#[no_mangle]
pub unsafe extern "C" fn tmpd_sliced_w1(a: *const TmpdSamples, b: *const TmpdSamples, n_slices: usize, seed: u64, out: *mut f64) -> TmpdStatus {
    guard(|| unsafe {
        let (a, b) = (get(a, "a")?, get(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = sliced_w1(&matrix(a), &matrix(b), &SlicedWassersteinConfig { n_slices, seed })?;
        Ok(())
    })
}

/// W2 between N(m1, c1) and N(m2, c2); covariances row-major d x d.
#[no_mangle]
pub unsafe extern "C" fn tmpd_gaussian_w2(
    d: usize,
    m1: *const f64,
    c1: *const f64,
    m2: *const f64,
    c2: *const f64,
    out: *mut f64,
) -> TmpdStatus {
    guard(|| unsafe {
        let v = |p, w| slice(p, d, w).map(DVector::from_column_slice);
        let c = |p, w| slice(p, d * d, w).map(|s| row_major(d, d, s));
        if out.is_null() {
            return Err(null("out"));
        }
        *out = gaussian_w2(&v(m1, "m1")?, &c(c1, "c1")?, &v(m2, "m2")?, &c(c2, "c2")?)?;
        Ok(())
    })
}
