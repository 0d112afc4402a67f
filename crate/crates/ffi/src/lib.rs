//! C ABI for the shiftcache engine.
//!
//! Every fallible function returns an [`ScStatus`]; on failure the message
//! is available from [`sc_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings
//! returned through `char **` are owned by the caller and released with
//! [`sc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shiftcache::cache::{build_mask, Freshness, FreshnessFlags};
use shiftcache::cli_io::{save_latents, ConfigFile, KeypointsFile, Resolved};
use shiftcache::diffusion::LatentVideo;
use shiftcache::numerics::MaskVariant;
use shiftcache::pose_select::{default_specs, select_best_frame};
use shiftcache::scheduler::{build_plans, run_inference, RunStats};
use shiftcache::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Shape = 5,
    Format = 6,
    Io = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Temporal attention mask variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScMaskVariant {
    Full = 0,
    Half = 1,
    Quarter = 2,
    Causal = 3,
}

impl From<ScMaskVariant> for MaskVariant {
    fn from(v: ScMaskVariant) -> Self {
        match v {
            ScMaskVariant::Full => MaskVariant::Full,
            ScMaskVariant::Half => MaskVariant::Half,
            ScMaskVariant::Quarter => MaskVariant::Quarter,
            ScMaskVariant::Causal => MaskVariant::Causal,
        }
    }
}

/// A resolved configuration: denoiser, conditions and engine settings.
pub struct ScEngine {
    resolved: Resolved,
}

/// Final latents and counters of one sampling run.
pub struct ScRun {
    latents: LatentVideo,
    stats: RunStats,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ScStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => ScStatus::Shape,
            Error::InvalidArgument(_) | Error::BlockedRow { .. } => ScStatus::InvalidArgument,
            Error::CacheMiss { .. } | Error::Stale { .. } => ScStatus::InvalidArgument,
            Error::NonFinite(_) => ScStatus::Numeric,
            Error::Config(_) => ScStatus::Config,
            Error::Format(_) | Error::Json(_) => ScStatus::Format,
            Error::Io { .. } => ScStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            ScStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ScStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ScStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| Failure(ScStatus::Format, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds an engine from a JSON config (same keys as the CLI config file;
/// `"{}"` gives all defaults).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_engine_new(json: *const c_char, out: *mut *mut ScEngine) -> ScStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ConfigFile::from_json(read_str(json, "json")?)?;
        let resolved = config.resolve()?;
        *out = Box::into_raw(Box::new(ScEngine { resolved }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`sc_engine_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sc_engine_free(engine: *mut ScEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Fully resolved configuration as JSON.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_engine_config_json(engine: *const ScEngine, out: *mut *mut c_char) -> ScStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        write_string(out, e.resolved.config.to_json())
    })
}

/// Per-step chunk plans as a JSON array.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_engine_plan_json(engine: *const ScEngine, out: *mut *mut c_char) -> ScStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let (plans, _) = build_plans(&e.resolved.engine)?;
        write_string(out, serde_json::to_string(&plans).map_err(Error::from)?)
    })
}

/// Runs sampling to completion.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_engine_run(engine: *const ScEngine, out: *mut *mut ScRun) -> ScStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = &e.resolved;
        let (latents, stats) = run_inference(&r.engine, r.denoiser.as_ref(), &r.conditions)?;
        *out = Box::into_raw(Box::new(ScRun { latents, stats }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`sc_engine_run`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sc_run_free(run: *mut ScRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes the latent dims `[N, C, H, W]` into `dims`.
///
/// # Safety
/// `run` must be a live handle; `dims` must point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn sc_run_dims(run: *const ScRun, dims: *mut usize) -> ScStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 4).copy_from_slice(r.latents.z.shape());
        Ok(())
    })
}

/// Copies the final latents (row-major `[N, C, H, W]`) into `buf`.
///
/// # Safety
/// `run` must be a live handle; `buf` must hold `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn sc_run_copy_latents(run: *const ScRun, buf: *mut f32, len: usize) -> ScStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let data = r.latents.z.data();
        if len < data.len() {
            return Err(Failure(
                ScStatus::BufferTooSmall,
                format!("buffer holds {len} floats, need {}", data.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// Run counters as JSON.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_run_stats_json(run: *const ScRun, out: *mut *mut c_char) -> ScStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        write_string(out, serde_json::to_string(&r.stats).map_err(Error::from)?)
    })
}

/// Writes the final latents as an LVT1 file.
///
/// # Safety
/// `run` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sc_run_save_latents(run: *const ScRun, path: *const c_char) -> ScStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        save_latents(read_str(path, "path")?, &r.latents)?;
        Ok(())
    })
}

/// Builds an `len × len` temporal mask. `good[i] != 0` marks frame `i` as
/// fresh; `allowed` receives 1 where query row `q` may attend key `k`
/// (index `q * len + k`), 0 elsewhere.
///
/// # Safety
/// `good` must hold `len` bytes; `allowed` must hold `len * len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sc_mask_build(
    variant: ScMaskVariant,
    good: *const u8,
    len: usize,
    allowed: *mut u8,
) -> ScStatus {
    guard(|| {
        if good.is_null() || allowed.is_null() {
            return Err(null("good/allowed"));
        }
        let flags = FreshnessFlags(
            std::slice::from_raw_parts(good, len)
                .iter()
                .map(|&g| if g != 0 { Freshness::Good } else { Freshness::Bad })
                .collect(),
        );
        let mask = build_mask(variant.into(), &flags)?;
        let out = std::slice::from_raw_parts_mut(allowed, len * len);
        for (o, &a) in out.iter_mut().zip(mask.allowed()) {
            *o = a as u8;
        }
        Ok(())
    })
}

/// Picks the reference frame from keypoint JSON and writes its
/// `frame_index` to `out`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sc_select_frame(json: *const c_char, conf_threshold: f64, out: *mut usize) -> ScStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let file = KeypointsFile::from_json(read_str(json, "json")?)?;
        *out = select_best_frame(&file.frames, &default_specs(), conf_threshold)?;
        Ok(())
    })
}
