//! C ABI over the cellpilot library.
//!
//! Models and sessions are opaque handles created by `cp_*_new`/`cp_*_load`
//! and released with the matching `cp_*_free`. Every fallible call returns a
//! [`CpStatus`]; on failure a message is available from
//! [`cp_last_error_message`] on the same thread. Masks cross the boundary as
//! row-major `height × width` byte buffers holding 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use cellpilot::dataio::export_session;
use cellpilot::maskcore::{iou, BinaryMask, BoxPrompt, PointPrompt, Prompt};
use cellpilot::model::{inject_lora, load_checkpoint, ModelConfig, ToyBackbone};
use cellpilot::pipeline::{BlobDetector, Session};
use cellpilot::{Error, RgbImage};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    OutOfRange = 4,
    Format = 5,
    ConfigMismatch = 6,
    Io = 7,
    Model = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct CpModel {
    inner: Arc<ToyBackbone>,
}

/// Opaque annotation session handle; keeps its model alive.
pub struct CpSession {
    model: Arc<ToyBackbone>,
    inner: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::NotFound(_) => CpStatus::NotFound,
        Error::OutOfRange(_) => CpStatus::OutOfRange,
        Error::Format { .. } | Error::Checksum(_) | Error::Image(_) | Error::Json(_) => CpStatus::Format,
        Error::ConfigMismatch(_) => CpStatus::ConfigMismatch,
        Error::Io(_) => CpStatus::Io,
        Error::Shape { .. } | Error::EmptyMask | Error::Config(_) | Error::InvalidState(_) => {
            CpStatus::InvalidArgument
        }
        _ => CpStatus::Model,
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), (CpStatus, String)>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CpStatus::Panic
        }
    }
}

fn lib<T>(r: cellpilot::Result<T>) -> Result<T, (CpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CpStatus, String) {
    (CpStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (CpStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (CpStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (CpStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (CpStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Creates a toy backbone with the default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cp_model_new_toy(seed: u64, with_lora: bool, out: *mut *mut CpModel) -> CpStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let cfg = ModelConfig::default();
        let mut model = lib(ToyBackbone::new(cfg.clone(), seed))?;
        if with_lora {
            model = lib(inject_lora(model, &cfg.lora))?;
        }
        *out = Box::into_raw(Box::new(CpModel {
            inner: Arc::new(model),
        }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_load(path: *const c_char, out: *mut *mut CpModel) -> CpStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let path = path_arg(path)?;
        let model = lib(load_checkpoint(&path, None))?;
        *out = Box::into_raw(Box::new(CpModel {
            inner: Arc::new(model),
        }));
        Ok(())
    })
}

/// Releases a model. Sessions created from it stay valid.
///
/// # Safety
/// `model` must come from `cp_model_new_toy`/`cp_model_load` or be NULL, and
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cp_model_free(model: *mut CpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square model input.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_input_size(model: *const CpModel, out: *mut usize) -> CpStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(model, "model")?.inner.config().input_size;
        Ok(())
    })
}

/// Starts a session on an interleaved 8-bit RGB image and computes its
/// embedding.
///
/// # Safety
/// `rgb` must point to `height * width * 3` readable bytes; `model` must be a
/// live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_new(
    model: *const CpModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut *mut CpSession,
) -> CpStatus {
    guard(|| {
        let model = Arc::clone(&as_ref(model, "model")?.inner);
        let out = as_mut(out, "out")?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let len = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(3))
            .ok_or((CpStatus::InvalidArgument, "image dimensions overflow".into()))?;
        let bytes = std::slice::from_raw_parts(rgb, len);
        let image = lib(RgbImage::from_rgb8(height, width, bytes))?;
        let inner = lib(Session::new(model.as_ref(), image, ""))?;
        *out = Box::into_raw(Box::new(CpSession { model, inner }));
        Ok(())
    })
}

/// Starts a session on an image file (PNG, TIFF or JPEG).
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cp_session_open(
    model: *const CpModel,
    path: *const c_char,
    out: *mut *mut CpSession,
) -> CpStatus {
    guard(|| {
        let model = Arc::clone(&as_ref(model, "model")?.inner);
        let out = as_mut(out, "out")?;
        let path = path_arg(path)?;
        let image = lib(RgbImage::open(&path))?;
        let inner = lib(Session::new(model.as_ref(), image, path))?;
        *out = Box::into_raw(Box::new(CpSession { model, inner }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from `cp_session_new`/`cp_session_open` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cp_session_free(session: *mut CpSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Image height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cp_session_dims(
    session: *const CpSession,
    height: *mut usize,
    width: *mut usize,
) -> CpStatus {
    guard(|| {
        let (h, w) = as_ref(session, "session")?.inner.image().dims();
        *as_mut(height, "height")? = h;
        *as_mut(width, "width")? = w;
        Ok(())
    })
}

fn point(row: usize, col: usize, positive: bool) -> Prompt {
    Prompt::Point(if positive {
        PointPrompt::positive(row, col)
    } else {
        PointPrompt::negative(row, col)
    })
}

fn bbox(
    row_min: usize,
    col_min: usize,
    row_max: usize,
    col_max: usize,
) -> Result<Prompt, (CpStatus, String)> {
    if row_min > row_max || col_min > col_max {
        return Err((CpStatus::InvalidArgument, "box corners are not ordered".into()));
    }
    Ok(Prompt::Box(BoxPrompt::new(row_min, col_min, row_max, col_max)))
}

unsafe fn add(
    session: *mut CpSession,
    prompt: Result<Prompt, (CpStatus, String)>,
    mask_id: *mut u64,
) -> CpStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        let out = as_mut(mask_id, "mask_id")?;
        let model = Arc::clone(&s.model);
        *out = lib(s.inner.add_mask(model.as_ref(), prompt?))?;
        Ok(())
    })
}

unsafe fn refine(
    session: *mut CpSession,
    mask_id: u64,
    prompt: Result<Prompt, (CpStatus, String)>,
) -> CpStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        let model = Arc::clone(&s.model);
        lib(s.inner.refine_mask(model.as_ref(), mask_id, prompt?))?;
        Ok(())
    })
}

/// New mask from one point; writes its id to `mask_id`.
///
/// # Safety
/// `session` must be a live handle and `mask_id` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_add_point(
    session: *mut CpSession,
    row: usize,
    col: usize,
    positive: bool,
    mask_id: *mut u64,
) -> CpStatus {
    add(session, Ok(point(row, col, positive)), mask_id)
}

/// New mask from an inclusive box; writes its id to `mask_id`.
///
/// # Safety
/// `session` must be a live handle and `mask_id` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_add_box(
    session: *mut CpSession,
    row_min: usize,
    col_min: usize,
    row_max: usize,
    col_max: usize,
    mask_id: *mut u64,
) -> CpStatus {
    add(session, bbox(row_min, col_min, row_max, col_max), mask_id)
}

/// Adds a point to a mask's history and re-decodes it.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_session_refine_point(
    session: *mut CpSession,
    mask_id: u64,
    row: usize,
    col: usize,
    positive: bool,
) -> CpStatus {
    refine(session, mask_id, Ok(point(row, col, positive)))
}

/// Adds a box to a mask's history and re-decodes it.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_session_refine_box(
    session: *mut CpSession,
    mask_id: u64,
    row_min: usize,
    col_min: usize,
    row_max: usize,
    col_max: usize,
) -> CpStatus {
    refine(session, mask_id, bbox(row_min, col_min, row_max, col_max))
}

/// Reverts the last refinement of a mask.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_session_undo(session: *mut CpSession, mask_id: u64) -> CpStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        let model = Arc::clone(&s.model);
        lib(s.inner.undo(model.as_ref(), mask_id))?;
        Ok(())
    })
}

/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_session_remove(session: *mut CpSession, mask_id: u64) -> CpStatus {
    guard(|| {
        lib(as_mut(session, "session")?.inner.remove_mask(mask_id))?;
        Ok(())
    })
}

/// Automatic masks from the built-in intensity-threshold detector.
/// Replaces earlier automatic masks; writes the number created to `count`.
///
/// # Safety
/// `session` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_auto_segment(
    session: *mut CpSession,
    threshold: f32,
    dark_foreground: bool,
    count: *mut usize,
) -> CpStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        let count = as_mut(count, "count")?;
        let detector = BlobDetector {
            threshold,
            dark_foreground,
            ..Default::default()
        };
        let model = Arc::clone(&s.model);
        *count = lib(s.inner.auto_segment(model.as_ref(), &detector))?.len();
        Ok(())
    })
}

/// Writes up to `capacity` mask ids to `ids` and the total count to `len`.
/// Returns `BufferTooSmall` (with `len` set) if `capacity` is insufficient.
///
/// # Safety
/// `ids` must point to `capacity` writable slots (may be NULL when
/// `capacity` is 0); `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cp_session_mask_ids(
    session: *const CpSession,
    ids: *mut u64,
    capacity: usize,
    len: *mut usize,
) -> CpStatus {
    guard(|| {
        let masks = as_ref(session, "session")?.inner.masks();
        *as_mut(len, "len")? = masks.len();
        if masks.len() > capacity {
            return Err((
                CpStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", masks.len()),
            ));
        }
        if masks.is_empty() {
            return Ok(());
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        let out = std::slice::from_raw_parts_mut(ids, capacity);
        for (slot, m) in out.iter_mut().zip(masks) {
            *slot = m.id;
        }
        Ok(())
    })
}

/// Copies a mask into `buffer` (`height * width` bytes, 0 or 1).
///
/// # Safety
/// `buffer` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cp_session_get_mask(
    session: *const CpSession,
    mask_id: u64,
    buffer: *mut u8,
    len: usize,
) -> CpStatus {
    guard(|| {
        let rec = lib(as_ref(session, "session")?.inner.mask(mask_id))?;
        let data = rec.mask.data();
        if len < data.len() {
            return Err((
                CpStatus::BufferTooSmall,
                format!("mask needs {} bytes", data.len()),
            ));
        }
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        let out = std::slice::from_raw_parts_mut(buffer, data.len());
        for (o, &v) in out.iter_mut().zip(data) {
            *o = v as u8;
        }
        Ok(())
    })
}

/// Number of prompts in a mask's history.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_history_len(
    session: *const CpSession,
    mask_id: u64,
    out: *mut usize,
) -> CpStatus {
    guard(|| {
        let rec = lib(as_ref(session, "session")?.inner.mask(mask_id))?;
        *as_mut(out, "out")? = rec.history.len();
        Ok(())
    })
}

/// Annotation export (schema 1) as a NUL-terminated JSON string; release
/// with `cp_string_free`.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_session_export_json(
    session: *const CpSession,
    out: *mut *mut c_char,
) -> CpStatus {
    guard(|| {
        let s = as_ref(session, "session")?;
        let out = as_mut(out, "out")?;
        let json =
            serde_json::to_string(&export_session(&s.inner)).map_err(|e| (CpStatus::Model, e.to_string()))?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// IoU of two `height × width` byte masks (nonzero = foreground).
///
/// # Safety
/// `a` and `b` must each point to `height * width` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn cp_mask_iou(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CpStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("mask"));
        }
        let n = height
            .checked_mul(width)
            .ok_or((CpStatus::InvalidArgument, "mask dimensions overflow".into()))?;
        let to_mask = |p: *const u8| {
            let v = std::slice::from_raw_parts(p, n).iter().map(|&x| x != 0).collect();
            lib(BinaryMask::from_vec(height, width, v))
        };
        *as_mut(out, "out")? = lib(iou(&to_mask(a)?, &to_mask(b)?))?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
