//! C ABI over the evenhancer library.
//!
//! Objects cross the boundary as opaque handles created by `ev_*_load` or
//! returned through out-parameters and released with the matching `*_free`.
//! Every fallible call returns an [`EvStatus`]; on failure the message is
//! available from [`ev_last_error`] on the same thread until the next
//! status-returning call.
//!
//! Frames are row-major `height x width x 3` RGB doubles in `[0, 1]`. Event
//! times are normalized to `[0, 1]` over the interval between the two input
//! frames.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use evenhancer::dataio::load_checkpoint;
use evenhancer::events::{voxelize, EventRecord, EventStream};
use evenhancer::frame::Frame;
use evenhancer::livt::QuerySpec;
use evenhancer::model::{EvEnhancer, ModelInput};
use evenhancer::nn::{InitScheme, ParamStore};
use evenhancer::{selftest, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidEvent = 3,
    Shape = 4,
    Range = 5,
    Parse = 6,
    Io = 7,
    Image = 8,
    NonFinite = 9,
    CheckFailed = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

impl From<&Error> for EvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) => EvStatus::InvalidConfig,
            Error::InvalidEvent { .. } => EvStatus::InvalidEvent,
            Error::Shape(_) => EvStatus::Shape,
            Error::Range(_) => EvStatus::Range,
            Error::Parse { .. } => EvStatus::Parse,
            Error::Io { .. } => EvStatus::Io,
            Error::Image { .. } => EvStatus::Image,
            Error::NonFinite { .. } => EvStatus::NonFinite,
            Error::CheckFailed(_) => EvStatus::CheckFailed,
        }
    }
}

/// A loaded network and its weights.
pub struct EvModel {
    model: EvEnhancer,
    store: ParamStore,
}

/// A list of rendered frames.
pub struct EvFrames {
    frames: Vec<Frame>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, translating errors and panics into a status and the last-error slot.
fn guard(f: impl FnOnce() -> Result<(), (EvStatus, String)>) -> EvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            EvStatus::Panic
        }
    }
}

fn lib(e: Error) -> (EvStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (EvStatus, String) {
    (EvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (EvStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn events_from(t: *const f64, x: *const u32, y: *const u32, p: *const i8, n: usize) -> Result<EventStream, (EvStatus, String)> {
    let (t, x, y, p) = (slice_in(t, n, "t")?, slice_in(x, n, "x")?, slice_in(y, n, "y")?, slice_in(p, n, "p")?);
    let records = (0..n).map(|i| EventRecord::new(t[i], x[i], y[i], p[i])).collect();
    EventStream::new(records).map_err(lib)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next status-returning call on the same thread.
#[no_mangle]
pub extern "C" fn ev_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ev_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file into a new model handle stored in `*out`.
#[no_mangle]
pub unsafe extern "C" fn ev_model_load(path: *const c_char, out: *mut *mut EvModel) -> EvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| (EvStatus::InvalidUtf8, format!("path is not UTF-8: {e}")))?;
        let ck = load_checkpoint(&PathBuf::from(path)).map_err(lib)?;
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, &ck.config, InitScheme::Standard).map_err(lib)?;
        ck.restore(&mut store).map_err(lib)?;
        *out = Box::into_raw(Box::new(EvModel { model, store }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ev_model_free(model: *mut EvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Event segment count `M` the model expects; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ev_model_segments(model: *const EvModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.model.segments)
}

/// Accumulate `n` events into an `(m + 1) x height x width` voxel grid written
/// to `out`, which must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ev_voxelize(
    t: *const f64,
    x: *const u32,
    y: *const u32,
    p: *const i8,
    n: usize,
    height: usize,
    width: usize,
    m: usize,
    out: *mut f64,
    out_len: usize,
) -> EvStatus {
    guard(|| {
        let events = events_from(t, x, y, p, n)?;
        let v = voxelize(&events, height, width, m).map_err(lib)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != v.data().len() {
            return Err((EvStatus::Shape, format!("out holds {out_len} values, grid needs {}", v.data().len())));
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(v.data());
        Ok(())
    })
}

/// Render frames at scale `s` for `n_times` target times between `frame0` and
/// `frame1` (each `height x width x 3`), guided by `n_events` events at the
/// input resolution. The result handle is stored in `*out`.
#[no_mangle]
pub unsafe extern "C" fn ev_model_infer(
    model: *const EvModel,
    frame0: *const f64,
    frame1: *const f64,
    height: usize,
    width: usize,
    t: *const f64,
    x: *const u32,
    y: *const u32,
    p: *const i8,
    n_events: usize,
    s: f64,
    times: *const f64,
    n_times: usize,
    out: *mut *mut EvFrames,
) -> EvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let len = height * width * 3;
        let f0 = Frame::new(height, width, slice_in(frame0, len, "frame0")?.to_vec()).map_err(lib)?;
        let f1 = Frame::new(height, width, slice_in(frame1, len, "frame1")?.to_vec()).map_err(lib)?;
        let events = events_from(t, x, y, p, n_events)?;
        let vox = voxelize(&events, height, width, m.model.cfg.model.segments).map_err(lib)?;
        let query = QuerySpec::explicit(s, slice_in(times, n_times, "times")?.to_vec()).map_err(lib)?;
        let frames = m.model.infer(&m.store, &ModelInput::new(f0, f1, vox), &query).map_err(lib)?;
        *out = Box::into_raw(Box::new(EvFrames { frames }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ev_frames_free(frames: *mut EvFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Number of frames; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ev_frames_count(frames: *const EvFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.frames.len())
}

/// Size of frame `index`.
#[no_mangle]
pub unsafe extern "C" fn ev_frames_size(frames: *const EvFrames, index: usize, height: *mut usize, width: *mut usize) -> EvStatus {
    guard(|| {
        let f = frames.as_ref().ok_or_else(|| null("frames"))?;
        let fr = f.frames.get(index).ok_or_else(|| (EvStatus::Range, format!("frame {index} of {}", f.frames.len())))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = fr.height();
        *width = fr.width();
        Ok(())
    })
}

/// Copy frame `index` into `out`, which must hold exactly `height * width * 3`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ev_frames_copy(frames: *const EvFrames, index: usize, out: *mut f64, out_len: usize) -> EvStatus {
    guard(|| {
        let f = frames.as_ref().ok_or_else(|| null("frames"))?;
        let fr = f.frames.get(index).ok_or_else(|| (EvStatus::Range, format!("frame {index} of {}", f.frames.len())))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != fr.data().len() {
            return Err((EvStatus::Shape, format!("out holds {out_len} values, frame needs {}", fr.data().len())));
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(fr.data());
        Ok(())
    })
}

/// Run the built-in oracle checks. Writes the pass and total counts when the
/// pointers are non-null; returns `CheckFailed` if any check fails.
#[no_mangle]
pub unsafe extern "C" fn ev_selftest(passed: *mut usize, total: *mut usize) -> EvStatus {
    guard(|| {
        let results = selftest::run_all();
        let ok = results.iter().filter(|r| r.passed).count();
        if !passed.is_null() {
            *passed = ok;
        }
        if !total.is_null() {
            *total = results.len();
        }
        if ok == results.len() {
            Ok(())
        } else {
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.name, r.detail)).collect();
            Err((EvStatus::CheckFailed, failed.join("; ")))
        }
    })
}
