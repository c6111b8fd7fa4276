//! C ABI over `pat-core`: load a trained classifier checkpoint, score
//! standardized series, compute attention importance, and compute AUC.
//!
//! Every function returns a [`PatStatus`]. On failure a description is
//! available from [`pat_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use pat_core::checkpoint::{Checkpoint, CheckpointKind};
use pat_core::error::PatError;
use pat_core::eval::auc;
use pat_core::explain::{explain_series, Aggregation};
use pat_core::finetune::Classifier;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Contract = 3,
    Parse = 4,
    Checkpoint = 5,
    Io = 6,
    InvalidUtf8 = 7,
    Panic = 8,
}

/// Opaque handle to a loaded classifier.
pub struct PatModel {
    inner: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &PatError) -> PatStatus {
    match e.root() {
        PatError::Shape(_) => PatStatus::Shape,
        PatError::Contract(_) => PatStatus::Contract,
        PatError::Parse { .. } => PatStatus::Parse,
        PatError::Checkpoint(_) => PatStatus::Checkpoint,
        PatError::Io(_) => PatStatus::Io,
        PatError::Context { .. } => PatStatus::Contract,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PatStatus, String)>) -> PatStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PatStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PatStatus::Panic
        }
    }
}

fn core<T>(r: pat_core::Result<T>) -> Result<T, (PatStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PatStatus, String) {
    (PatStatus::NullPointer, format!("{what} is null"))
}

/// Loads a classifier checkpoint written by `pat finetune`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a handle that must be released with
/// [`pat_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pat_model_load(path: *const c_char, out: *mut *mut PatModel) -> PatStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (PatStatus::InvalidUtf8, "path is not UTF-8".into()))?;
        let ckpt = core(Checkpoint::load(Path::new(path)))?;
        if ckpt.kind != CheckpointKind::Classifier {
            return Err((PatStatus::Checkpoint, format!("checkpoint holds a {} model, not a classifier", ckpt.kind)));
        }
        let inner = core(Classifier::from_checkpoint(&ckpt))?;
        *out = Box::into_raw(Box::new(PatModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`pat_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pat_model_free(model: *mut PatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Series length `T` the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pat_model_series_len(model: *const PatModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.series_len)
}

/// Number of patch tokens `N`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pat_model_num_patches(model: *const PatModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.num_patches)
}

/// Probability of the positive class for one standardized series.
///
/// # Safety
/// `series` must point to `len` floats and `out` to one writable float.
#[no_mangle]
pub unsafe extern "C" fn pat_predict(
    model: *const PatModel,
    series: *const f32,
    len: usize,
    out: *mut f32,
) -> PatStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if series.is_null() {
            return Err(null("series"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = core(m.inner.predict(slice::from_raw_parts(series, len)))?;
        *out = p;
        Ok(())
    })
}

/// Minute-level attention importance (last block, attention received,
/// averaged over heads, summing to one over patches) for one standardized
/// series. `out_len` must equal `len`.
///
/// # Safety
/// `series` must point to `len` floats and `out` to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn pat_importance(
    model: *const PatModel,
    series: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> PatStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if series.is_null() {
            return Err(null("series"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != len {
            return Err((PatStatus::Shape, format!("output buffer holds {out_len} values, series has {len}")));
        }
        let minutes = core(explain_series(&m.inner, slice::from_raw_parts(series, len), Aggregation::Column))?;
        ptr::copy_nonoverlapping(minutes.as_ptr(), out, out_len);
        Ok(())
    })
}

/// Area under the ROC curve, ties counting one half. Labels are 0 or 1.
///
/// # Safety
/// `scores` and `labels` must each point to `n` values; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn pat_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> PatStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return Err(null("scores or labels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(auc(slice::from_raw_parts(scores, n), slice::from_raw_parts(labels, n)))?;
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn pat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
