//! C interface to the compressor and the cost model.
//!
//! Every entry point returns a [`BkvStatus`]; on failure the message is
//! available from [`bkv_last_error`] on the same thread. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use beaconkv::analyzer::{flops_beacon, flops_full, kv_cache_entries, FlopsSpec};
use beaconkv::compressor::{GenerateOptions, RatioPolicy, Sampling, Session};
use beaconkv::model::Model;
use beaconkv::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Usage = 6,
    State = 7,
    ConfigMismatch = 8,
    Numeric = 9,
    BufferTooSmall = 10,
    Internal = 11,
}

/// A loaded checkpoint.
pub struct BkvModel {
    model: Arc<Model<f32>>,
}

/// A growing compressed context bound to one model.
pub struct BkvSession {
    session: Session<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BkvStatus {
    match e {
        Error::Io(_) => BkvStatus::Io,
        Error::Format(_) => BkvStatus::Format,
        Error::Config(_) => BkvStatus::Config,
        Error::Usage(_) | Error::Data(_) => BkvStatus::Usage,
        Error::State(_) => BkvStatus::State,
        Error::ConfigMismatch { .. } => BkvStatus::ConfigMismatch,
        Error::Numeric(_) | Error::DegenerateRow { .. } => BkvStatus::Numeric,
        Error::Dimension(_) => BkvStatus::Internal,
    }
}

struct Fail(BkvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BkvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BkvStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside beaconkv");
            BkvStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BkvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            BkvStatus::InvalidString,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bkv_model_load(path: *const c_char, out: *mut *mut BkvModel) -> BkvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = Model::<f32>::load(path)?;
        *out = Box::into_raw(Box::new(BkvModel {
            model: Arc::new(model),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`bkv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bkv_model_free(model: *mut BkvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Chunk size `w` of the model.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bkv_model_chunk_size(
    model: *const BkvModel,
    out: *mut usize,
) -> BkvStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = model.model.config.chunk_size;
        Ok(())
    })
}

/// Opens an empty session. `policy` is `N`, `adaptive`, `random:SEED` or a
/// comma list of per-chunk ratios.
///
/// # Safety
/// `model` must be live; the session keeps its own reference, so the model
/// may be freed before the session.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_new(
    model: *const BkvModel,
    policy: *const c_char,
    out: *mut *mut BkvSession,
) -> BkvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let policy: RatioPolicy = str_arg(policy, "policy")?.parse()?;
        if let RatioPolicy::Constant(a) = policy {
            model.model.config.check_ratio(a)?;
        }
        let session = Session::new(Arc::clone(&model.model), policy);
        *out = Box::into_raw(Box::new(BkvSession { session }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`bkv_session_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_free(session: *mut BkvSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Compresses `len` more tokens; `chunks` receives the number of chunks encoded.
///
/// # Safety
/// `tokens` must hold `len` ids; `chunks` may be null.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_append(
    session: *mut BkvSession,
    tokens: *const u32,
    len: usize,
    chunks: *mut usize,
) -> BkvStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let n = s.session.append(slice_arg(tokens, len, "tokens")?)?;
        if let Some(c) = chunks.as_mut() {
            *c = n;
        }
        Ok(())
    })
}

/// Greedy decoding after `tail`, stopping at `stop` unless it is negative.
/// Writes up to `cap` ids to `out` and the count to `out_len`.
///
/// # Safety
/// `tail` must hold `tail_len` ids and `out` room for `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_generate(
    session: *const BkvSession,
    tail: *const u32,
    tail_len: usize,
    max_new: usize,
    stop: i64,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> BkvStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let out_len = out_arg(out_len, "out_len")?;
        *out_len = 0;
        let tail = slice_arg(tail, tail_len, "tail")?;
        let opts = GenerateOptions {
            max_new,
            sampling: Sampling::Greedy,
            stop: u32::try_from(stop).ok(),
            policy: s.session.policy().clone(),
        };
        let ids = s.session.generate(tail, &opts)?;
        if ids.len() > cap {
            return Err(Fail(
                BkvStatus::BufferTooSmall,
                format!("{} tokens do not fit a buffer of {cap}", ids.len()),
            ));
        }
        if !ids.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
        }
        *out_len = ids.len();
        Ok(())
    })
}

/// Cached entries per layer (`m`).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_entries(
    session: *const BkvSession,
    out: *mut usize,
) -> BkvStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        *out_arg(out, "out")? = s.session.cache().m();
        Ok(())
    })
}

/// Writes the session's cache as a snapshot file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bkv_session_save(
    session: *const BkvSession,
    path: *const c_char,
) -> BkvStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let path = str_arg(path, "path")?;
        s.session.cache().save(&s.session.model().config, path)?;
        Ok(())
    })
}

/// Forward FLOPs of a named preset at length `n` and ratio `alpha`, for
/// full attention and for beacon compression.
///
/// # Safety
/// `preset` must be a NUL-terminated string; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn bkv_flops(
    preset: *const c_char,
    n: u64,
    alpha: u64,
    full: *mut f64,
    beacon: *mut f64,
) -> BkvStatus {
    guard(|| {
        let spec = FlopsSpec::preset(str_arg(preset, "preset")?)?.with_alpha(alpha);
        spec.validate()?;
        let (full, beacon) = (out_arg(full, "full")?, out_arg(beacon, "beacon")?);
        *full = flops_full(&spec, n) as f64;
        *beacon = flops_beacon(&spec, n) as f64;
        Ok(())
    })
}

/// KV entries per layer for full attention and for beacon compression.
///
/// # Safety
/// Outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bkv_kv_entries(
    n: u64,
    chunk_size: u64,
    alpha: u64,
    full: *mut u64,
    beacon: *mut u64,
) -> BkvStatus {
    guard(|| {
        let e = kv_cache_entries(n, chunk_size, alpha)?;
        *out_arg(full, "full")? = e.full;
        *out_arg(beacon, "beacon")? = e.beacon;
        Ok(())
    })
}
