//! C ABI over the segmentation library.
//!
//! Every fallible function returns a [`ClicksegStatus`]; on failure the
//! message is kept per thread and can be read with
//! [`clickseg_last_error_message`]. Objects are opaque handles released with
//! their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use clickseg::geometry::PointCloud;
use clickseg::io::load_checkpoint;
use clickseg::model::{ModelConfig, ModelParams};
use clickseg::pipeline::{segment, SegmentationResult};
use clickseg::sampling::{Click, ClickSet};
use clickseg::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClicksegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NoClicks = 3,
    Io = 4,
    Checkpoint = 5,
    Parse = 6,
    Internal = 7,
}

/// A loaded model.
pub struct ClicksegModel {
    inner: ModelParams,
}

/// Per-point labels produced by [`clickseg_segment`].
pub struct ClicksegResult {
    inner: SegmentationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(err: Error) -> ClicksegStatus {
    let status = match &err {
        Error::NoClicks => ClicksegStatus::NoClicks,
        Error::Io(_) => ClicksegStatus::Io,
        Error::Checkpoint(_) => ClicksegStatus::Checkpoint,
        Error::Json(_) | Error::Parse(_) => ClicksegStatus::Parse,
        Error::InvalidInput(_)
        | Error::Shape(_)
        | Error::InsufficientPoints { .. }
        | Error::NonFinite(_)
        | Error::NotFound(_)
        | Error::DegenerateHierarchy(_)
        | Error::Placement(_) => ClicksegStatus::InvalidInput,
    };
    set_error(err.to_string());
    status
}

fn null_arg(name: &str) -> ClicksegStatus {
    set_error(format!("{name} is null"));
    ClicksegStatus::NullPointer
}

/// Runs `f`, turning a panic into `Internal`.
fn guarded(f: impl FnOnce() -> ClicksegStatus) -> ClicksegStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == ClicksegStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => {
            set_error("internal panic");
            ClicksegStatus::Internal
        }
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or
/// 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn clickseg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clickseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn read_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, ClicksegStatus> {
    if s.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        ClicksegStatus::InvalidInput
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clickseg_model_load(
    path: *const c_char,
    out: *mut *mut ClicksegModel,
) -> ClicksegStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(ClicksegModel { inner: m }));
                ClicksegStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Builds a freshly initialized model from a JSON configuration; an empty
/// string selects the default architecture.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clickseg_model_new(
    config_json: *const c_char,
    out: *mut *mut ClicksegModel,
) -> ClicksegStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match read_str(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = if text.trim().is_empty() {
            ModelConfig::default()
        } else {
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(e) => return fail(Error::Json(e)),
            }
        };
        match ModelParams::new(config) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(ClicksegModel { inner: m }));
                ClicksegStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_model_num_parameters(model: *const ClicksegModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_parameters())
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clickseg_model_free(model: *mut ClicksegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments a scene in one pass.
///
/// `points` holds `num_points` xyz triples, `colors` is null or holds
/// `num_points` rgb triples in [0, 1], `clicks` holds `num_clicks` xyz
/// triples and `groups` the group id of each click.
///
/// # Safety
/// All non-null array pointers must be valid for the stated lengths;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clickseg_segment(
    model: *const ClicksegModel,
    points: *const f64,
    colors: *const f64,
    num_points: usize,
    clicks: *const f64,
    groups: *const i64,
    num_clicks: usize,
    out: *mut *mut ClicksegResult,
) -> ClicksegStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if out.is_null() {
            return null_arg("out");
        }
        if points.is_null() {
            return null_arg("points");
        }
        if num_clicks > 0 && (clicks.is_null() || groups.is_null()) {
            return null_arg("clicks");
        }
        let triples = |p: *const f64, n: usize| -> Vec<[f64; 3]> {
            std::slice::from_raw_parts(p, n * 3)
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect()
        };
        let positions = triples(points, num_points);
        let cols = (!colors.is_null()).then(|| triples(colors, num_points));
        let cloud = match PointCloud::with_colors(positions, cols) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let click_set = if num_clicks == 0 {
            ClickSet::default()
        } else {
            let g = std::slice::from_raw_parts(groups, num_clicks);
            ClickSet::new(
                triples(clicks, num_clicks)
                    .into_iter()
                    .zip(g)
                    .map(|(p, &g)| Click::new(p, g))
                    .collect(),
            )
        };
        match segment(&cloud, &click_set, &model.inner) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(ClicksegResult { inner: r }));
                ClicksegStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of points labeled by the result.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_num_points(result: *const ClicksegResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.num_points())
}

/// Group id per point (`-1` = background); valid until the result is freed.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_point_instance(
    result: *const ClicksegResult,
) -> *const i64 {
    result
        .as_ref()
        .map_or(ptr::null(), |r| r.inner.point_instance.as_ptr())
}

/// Class per point (`-1` = background); valid until the result is freed.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_point_class(result: *const ClicksegResult) -> *const i64 {
    result
        .as_ref()
        .map_or(ptr::null(), |r| r.inner.point_class.as_ptr())
}

/// Number of distinct click groups.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_num_groups(result: *const ClicksegResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.groups.len())
}

/// Sorted group ids; valid until the result is freed.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_groups(result: *const ClicksegResult) -> *const i64 {
    result
        .as_ref()
        .map_or(ptr::null(), |r| r.inner.groups.as_ptr())
}

/// Serializes the result as JSON into a new string released with
/// [`clickseg_string_free`].
///
/// # Safety
/// `result` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_to_json(
    result: *const ClicksegResult,
    out: *mut *mut c_char,
) -> ClicksegStatus {
    guarded(|| {
        let Some(r) = result.as_ref() else {
            return null_arg("result");
        };
        if out.is_null() {
            return null_arg("out");
        }
        match r.inner.to_json() {
            Ok(s) => match CString::new(s) {
                Ok(c) => {
                    *out = c.into_raw();
                    ClicksegStatus::Ok
                }
                Err(_) => {
                    set_error("result JSON contains NUL");
                    ClicksegStatus::Internal
                }
            },
            Err(e) => fail(e),
        }
    })
}

/// Releases a result. Null is ignored.
///
/// # Safety
/// `result` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clickseg_result_free(result: *mut ClicksegResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clickseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
