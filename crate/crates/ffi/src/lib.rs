//! C ABI for slotnorm: checkpoint loading and segmentation, vMF mixture
//! fitting, ARI scoring and the theory checks.
//!
//! Every function returns a [`SlotnormStatus`]; on failure the message is
//! available from [`slotnorm_last_error_message`] until the next call on the
//! same thread. Handles are created by `*_load`/`*_fit` and released by the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use slotnorm::dataset::SceneSample;
use slotnorm::harness::eval::segment;
use slotnorm::harness::TrainedModel;
use slotnorm::metrics::{ari, foreground_ari};
use slotnorm::vmf_em::{em_fit, log_likelihood, VmfMixture};
use slotnorm::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotnormStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Contract = 4,
    Numeric = 5,
    UndefinedMetric = 6,
    Io = 7,
    Format = 8,
    Config = 9,
    Panic = 10,
    Internal = 11,
}

/// Loaded model checkpoint.
pub struct SlotnormModel {
    inner: TrainedModel,
}

/// Fitted von Mises-Fisher mixture with its log-likelihood trace.
pub struct SlotnormVmfMixture {
    mixture: VmfMixture,
    trace: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SlotnormStatus {
    match e {
        Error::Shape { .. } => SlotnormStatus::Shape,
        Error::Contract { .. } => SlotnormStatus::Contract,
        Error::DivisionByZero(_)
        | Error::DegenerateComponent { .. }
        | Error::NotRecoverable
        | Error::Diverged { .. } => SlotnormStatus::Numeric,
        Error::UndefinedMetric(_) => SlotnormStatus::UndefinedMetric,
        Error::Io { .. } => SlotnormStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => SlotnormStatus::Format,
        Error::Config(_) => SlotnormStatus::Config,
        Error::Generation(_) => SlotnormStatus::Internal,
    }
}

enum Failure {
    Status(SlotnormStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(SlotnormStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(SlotnormStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SlotnormStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlotnormStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            SlotnormStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Message of the most recent failure on this thread ("" after success).
/// Valid until the next slotnorm call on the same thread.
#[no_mangle]
pub extern "C" fn slotnorm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `slotnorm train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_model_load(
    path: *const c_char,
    out_model: *mut *mut SlotnormModel,
) -> SlotnormStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let inner = TrainedModel::load(Path::new(path))?;
        *out_model = Box::into_raw(Box::new(SlotnormModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`slotnorm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_model_free(model: *mut SlotnormModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square image side the model expects.
///
/// # Safety
/// `model` must be a live handle; `out_resolution` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_model_resolution(
    model: *const SlotnormModel,
    out_resolution: *mut usize,
) -> SlotnormStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_resolution, "out_resolution")? = model.inner.config.resolution;
        Ok(())
    })
}

/// Segments one `height × width × 3` image (row-major, values in [-1, 1])
/// with `slots` slots and `iters` iterations; writes `height * width` slot
/// indices to `out_labels`. `seed` fixes the slot initialization.
///
/// # Safety
/// `image` must hold `height * width * 3` doubles and `out_labels`
/// `height * width` entries.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_model_segment(
    model: *const SlotnormModel,
    image: *const f64,
    height: usize,
    width: usize,
    slots: usize,
    iters: usize,
    seed: u64,
    out_labels: *mut u32,
) -> SlotnormStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if height == 0 || width == 0 || slots == 0 || iters == 0 {
            return Err(invalid("height, width, slots and iters must be positive"));
        }
        let pixels = height
            .checked_mul(width)
            .ok_or_else(|| invalid("image too large"))?;
        let data = slice(image, pixels * 3, "image")?.to_vec();
        let labels = slice_mut(out_labels, pixels, "out_labels")?;
        let scene = SceneSample {
            image: Tensor::new(&[height, width, 3], data)?,
            labels: vec![0; pixels],
            object_count: 0,
        };
        let (pred, _) = segment(&model.inner, &scene, slots, iters, seed)?;
        for (o, p) in labels.iter_mut().zip(pred) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Fits a `k`-component mixture with shared concentration to `n` unit rows
/// of dimension `d`.
///
/// # Safety
/// `x` must hold `n * d` doubles; `out_mixture` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_fit(
    x: *const f64,
    n: usize,
    d: usize,
    k: usize,
    iters: usize,
    concentration: f64,
    seed: u64,
    out_mixture: *mut *mut SlotnormVmfMixture,
) -> SlotnormStatus {
    guard(|| {
        let out_mixture = out(out_mixture, "out_mixture")?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let x = Tensor::new(&[n, d], slice(x, len, "x")?.to_vec())?;
        let (mixture, trace) = em_fit(&x, k, iters, concentration, seed)?;
        *out_mixture = Box::into_raw(Box::new(SlotnormVmfMixture { mixture, trace }));
        Ok(())
    })
}

/// # Safety
/// `mixture` must come from [`slotnorm_vmf_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_free(mixture: *mut SlotnormVmfMixture) {
    if !mixture.is_null() {
        drop(Box::from_raw(mixture));
    }
}

/// Number of components and dimension.
///
/// # Safety
/// `mixture` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_shape(
    mixture: *const SlotnormVmfMixture,
    out_components: *mut usize,
    out_dim: *mut usize,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        *out(out_components, "out_components")? = m.mixture.components();
        *out(out_dim, "out_dim")? = m.mixture.dim();
        Ok(())
    })
}

/// Copies the `components × dim` mean directions, row-major.
///
/// # Safety
/// `out_directions` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_directions(
    mixture: *const SlotnormVmfMixture,
    out_directions: *mut f64,
    len: usize,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        copy_exact(m.mixture.directions.data(), out_directions, len)
    })
}

/// Copies the mixing weights.
///
/// # Safety
/// `out_weights` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_weights(
    mixture: *const SlotnormVmfMixture,
    out_weights: *mut f64,
    len: usize,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        copy_exact(&m.mixture.weights, out_weights, len)
    })
}

/// Length of the log-likelihood trace (iterations + 1).
///
/// # Safety
/// `mixture` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_trace_len(
    mixture: *const SlotnormVmfMixture,
    out_len: *mut usize,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        *out(out_len, "out_len")? = m.trace.len();
        Ok(())
    })
}

/// Copies the log-likelihood trace, initial value first.
///
/// # Safety
/// `out_trace` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_trace(
    mixture: *const SlotnormVmfMixture,
    out_trace: *mut f64,
    len: usize,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        copy_exact(&m.trace, out_trace, len)
    })
}

/// Log-likelihood (up to the normalizing constant) of `n × d` unit rows.
///
/// # Safety
/// `x` must hold `n * d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_vmf_log_likelihood(
    mixture: *const SlotnormVmfMixture,
    x: *const f64,
    n: usize,
    d: usize,
    out_value: *mut f64,
) -> SlotnormStatus {
    guard(|| {
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let x = Tensor::new(&[n, d], slice(x, len, "x")?.to_vec())?;
        *out(out_value, "out_value")? = log_likelihood(&x, &m.mixture)?;
        Ok(())
    })
}

unsafe fn copy_exact(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Failure> {
    if len != src.len() {
        return Err(invalid(format!(
            "buffer holds {len} values, need {}",
            src.len()
        )));
    }
    slice_mut(dst, len, "output buffer")?.copy_from_slice(src);
    Ok(())
}

/// Adjusted Rand index of two labelings of `n` pixels.
///
/// # Safety
/// `pred` and `truth` must hold `n` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_ari(
    pred: *const u32,
    truth: *const u32,
    n: usize,
    out_value: *mut f64,
) -> SlotnormStatus {
    guard(|| {
        let (p, t) = (slice(pred, n, "pred")?, slice(truth, n, "truth")?);
        *out(out_value, "out_value")? = ari(p, t)?;
        Ok(())
    })
}

/// ARI over pixels whose true label differs from `background`.
///
/// # Safety
/// `pred` and `truth` must hold `n` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_foreground_ari(
    pred: *const u32,
    truth: *const u32,
    n: usize,
    background: u32,
    out_value: *mut f64,
) -> SlotnormStatus {
    guard(|| {
        let (p, t) = (slice(pred, n, "pred")?, slice(truth, n, "truth")?);
        *out(out_value, "out_value")? = foreground_ari(p, t, background)?;
        Ok(())
    })
}

/// Runs the theory checks; reports how many of how many passed.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotnorm_verify(
    seed: u64,
    out_passed: *mut usize,
    out_total: *mut usize,
) -> SlotnormStatus {
    guard(|| {
        let checks = slotnorm::theory::run_theory_suite(seed)?;
        *out(out_passed, "out_passed")? = checks.iter().filter(|c| c.passed).count();
        *out(out_total, "out_total")? = checks.len();
        Ok(())
    })
}
