//! C ABI over the stitch3d library.
//!
//! Conventions: every fallible function returns an [`St3Status`]; on
//! failure the message is kept per thread and read with
//! [`st3_last_error_message`]. Handles are opaque, created by `*_new`/
//! `*_load` functions and released by the matching `*_free`. Strings
//! returned to the caller are released with [`st3_string_free`]. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stitch3d::config::RunConfig;
use stitch3d::pipeline;
use stitch3d::stitch::{fit_stitch, StitchedModel};
use stitch3d::tensor::Tensor;
use stitch3d::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum St3Status {
    Ok = 0,
    InvalidArgument = 1,
    Shape = 2,
    Singular = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    Version = 7,
    Config = 8,
    MissingPrerequisite = 9,
    TrainingFailed = 10,
    NullPointer = 11,
    Panic = 12,
}

impl From<&Error> for St3Status {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => St3Status::Shape,
            Error::InvalidArgument(_) => St3Status::InvalidArgument,
            Error::Singular(_) => St3Status::Singular,
            Error::NonFinite(_) => St3Status::NonFinite,
            Error::Io { .. } => St3Status::Io,
            Error::Format { .. } => St3Status::Format,
            Error::Version { .. } => St3Status::Version,
            Error::Config(_) => St3Status::Config,
            Error::MissingPrerequisite { .. } => St3Status::MissingPrerequisite,
            Error::TrainingFailed(_) => St3Status::TrainingFailed,
        }
    }
}

/// Opaque run configuration.
pub struct St3Config {
    inner: RunConfig,
}

/// Opaque stitched 3D model loaded from a work directory.
pub struct St3Stitched {
    inner: StitchedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), (St3Status, String)>) -> St3Status {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => St3Status::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            St3Status::Panic
        }
    }
}

fn lib_err(e: Error) -> (St3Status, String) {
    ((&e).into(), e.to_string())
}

fn null_err(what: &str) -> (St3Status, String) {
    (St3Status::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (St3Status, String)> {
    if p.is_null() {
        return Err(null_err(what));
    }
    // SAFETY: caller passes a NUL-terminated string valid for this call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (St3Status::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (St3Status, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null_err(what));
    }
    // SAFETY: caller guarantees `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st3_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes (without the terminator) of the calling thread's last
/// error message, or 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn st3_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len − 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be writable for `len` bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn st3_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn st3_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: allocated by `CString::into_raw` here.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// New configuration holding every default.
#[no_mangle]
pub extern "C" fn st3_config_new() -> *mut St3Config {
    Box::into_raw(Box::new(St3Config {
        inner: RunConfig::default(),
    }))
}

/// Parses a JSON configuration into `*out`.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st3_config_from_json(json: *const c_char, out: *mut *mut St3Config) -> St3Status {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let text = unsafe { str_arg(json, "json") }?;
        let cfg = RunConfig::from_json(text).map_err(lib_err)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(St3Config { inner: cfg })) };
        Ok(())
    })
}

/// Applies one `dotted.key=value` override.
///
/// # Safety
/// `cfg` must be a live handle; `assignment` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn st3_config_set(cfg: *mut St3Config, assignment: *const c_char) -> St3Status {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let cfg = unsafe { cfg.as_mut() }.ok_or_else(|| null_err("cfg"))?;
        let a = unsafe { str_arg(assignment, "assignment") }?;
        cfg.inner.set(a).map_err(lib_err)
    })
}

/// Pretty JSON of the configuration; free with [`st3_string_free`].
/// Returns null for a null handle.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn st3_config_to_json(cfg: *const St3Config) -> *mut c_char {
    // SAFETY: caller passes a live handle or null.
    match unsafe { cfg.as_ref() } {
        Some(c) => into_c_string(c.inner.to_json()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn st3_config_free(cfg: *mut St3Config) {
    if !cfg.is_null() {
        // SAFETY: allocated by `Box::into_raw` here.
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Runs one pipeline stage by its command-line name (`gen-data`,
/// `train-vae`, ...). On success `*summary` (if not null) receives the
/// stage's summary lines joined by newlines; free it with
/// [`st3_string_free`].
///
/// # Safety
/// `cfg` must be a live handle, `stage` NUL-terminated, `summary` writable
/// or null.
#[no_mangle]
pub unsafe extern "C" fn st3_run_stage(
    cfg: *const St3Config,
    stage: *const c_char,
    resume: bool,
    summary: *mut *mut c_char,
) -> St3Status {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let cfg = &unsafe { cfg.as_ref() }.ok_or_else(|| null_err("cfg"))?.inner;
        let stage = unsafe { str_arg(stage, "stage") }?;
        let lines = match stage {
            "gen-data" => pipeline::gen_data(cfg),
            "train-vae" => pipeline::train_vae(cfg, resume),
            "train-3d" => pipeline::train_3d(cfg, resume),
            "train-critic" => pipeline::train_critic_stage(cfg),
            "train-gen" => pipeline::train_gen(cfg, resume),
            "scan" => pipeline::scan_stage(cfg),
            "stitch-finetune" => pipeline::stitch_finetune(cfg),
            "align" => pipeline::align_stage(cfg, resume).map(|(s, _)| s),
            "eval-robustness" => pipeline::eval_robustness(cfg).map(|(s, _)| s),
            "eval-scan" => pipeline::eval_scan(cfg).map(|(s, _)| s),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
        .map_err(lib_err)?;
        if !summary.is_null() {
            // SAFETY: checked non-null.
            unsafe { *summary = into_c_string(lines.join("\n")) };
        }
        Ok(())
    })
}

/// Closed-form ridge fit of `A ≈ B·S` on row-major buffers
/// `b: n×de`, `a: n×df`. Writes `S` (`de×df`) to `s_out` and the
/// per-element mean squared residual to `mse_out`.
///
/// # Safety
/// Buffers must hold the stated number of values; `mse_out` writable.
#[no_mangle]
pub unsafe extern "C" fn st3_fit_stitch(
    b: *const f64,
    n: usize,
    de: usize,
    a: *const f64,
    df: usize,
    ridge: f64,
    s_out: *mut f64,
    mse_out: *mut f64,
) -> St3Status {
    guard(|| {
        if s_out.is_null() || mse_out.is_null() {
            return Err(null_err("output buffer"));
        }
        let bt = Tensor::new(&[n, de], unsafe { slice_arg(b, n * de, "b") }?.to_vec()).map_err(lib_err)?;
        let at = Tensor::new(&[n, df], unsafe { slice_arg(a, n * df, "a") }?.to_vec()).map_err(lib_err)?;
        let (s, mse) = fit_stitch(&bt, &at, ridge).map_err(lib_err)?;
        // SAFETY: caller provides `de·df` writable values and one for the mse.
        unsafe {
            ptr::copy_nonoverlapping(s.data().as_ptr(), s_out, de * df);
            *mse_out = mse;
        }
        Ok(())
    })
}

/// Loads the fine-tuned stitched model from the configured work directory.
///
/// # Safety
/// `cfg` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn st3_stitched_load(cfg: *const St3Config, out: *mut *mut St3Stitched) -> St3Status {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        // SAFETY: caller passes a live handle or null.
        let cfg = &unsafe { cfg.as_ref() }.ok_or_else(|| null_err("cfg"))?.inner;
        let model = pipeline::load_stitched(cfg).map_err(lib_err)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(St3Stitched { inner: model })) };
        Ok(())
    })
}

/// Latent channels and frame height and width the model expects.
///
/// # Safety
/// `model` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn st3_stitched_dims(
    model: *const St3Stitched,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> St3Status {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null_err("model"))?.inner;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null_err("output"));
        }
        // SAFETY: checked non-null.
        unsafe {
            *channels = m.encoder.config.latent_channels;
            *height = m.net.height;
            *width = m.net.width;
        }
        Ok(())
    })
}

/// Pointmap of `views` frames from latents `z: [views, c, H/4, W/4]`
/// (row-major). Writes `views·H·W·3` coordinates and `views·H·W`
/// confidences; either output may be null to skip it.
///
/// # Safety
/// `z` must hold `z_len` values; non-null outputs must hold the stated
/// number of values.
#[no_mangle]
pub unsafe extern "C" fn st3_stitched_predict_latent(
    model: *const St3Stitched,
    z: *const f64,
    z_len: usize,
    views: usize,
    coords_out: *mut f64,
    confidence_out: *mut f64,
) -> St3Status {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null_err("model"))?.inner;
        let c = m.encoder.config.latent_channels;
        let (gh, gw) = (m.net.height / 4, m.net.width / 4);
        if views == 0 || z_len != views * c * gh * gw {
            return Err((
                St3Status::Shape,
                format!("latent length {z_len} is not views·{c}·{gh}·{gw} for {views} views"),
            ));
        }
        let zt = Tensor::new(&[views, c, gh, gw], unsafe { slice_arg(z, z_len, "z") }?.to_vec()).map_err(lib_err)?;
        let pred = m.predict_latent(&zt, views).map_err(lib_err)?;
        // SAFETY: caller sizes the buffers per the contract above.
        unsafe {
            if !coords_out.is_null() {
                ptr::copy_nonoverlapping(pred.coords.data().as_ptr(), coords_out, pred.coords.numel());
            }
            if !confidence_out.is_null() {
                ptr::copy_nonoverlapping(pred.confidence.data().as_ptr(), confidence_out, pred.confidence.numel());
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn st3_stitched_free(model: *mut St3Stitched) {
    if !model.is_null() {
        // SAFETY: allocated by `Box::into_raw` here.
        drop(unsafe { Box::from_raw(model) });
    }
}
