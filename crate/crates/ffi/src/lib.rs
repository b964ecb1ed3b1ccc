//! C ABI over the segmentation model. Handles are opaque; every call returns
//! a [`C2fStatus`] and leaves a message for [`c2f_last_error`] on failure.
//!
//! Features are passed row-major as `frames × feat_dim` `float`s, the same
//! layout as the on-disk feature files.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use c2f_tcn::data::{load_checkpoint, Checkpoint};
use c2f_tcn::metrics::evaluate;
use c2f_tcn::numerics::Tensor;
use c2f_tcn::supervised::{predict, predict_video};
use c2f_tcn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C2fStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Data = 5,
    Io = 6,
    Shape = 7,
    NonFinite = 8,
    Panic = 9,
}

impl From<&Error> for C2fStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => C2fStatus::Shape,
            Error::NonFinite(_) => C2fStatus::NonFinite,
            Error::Config(_) => C2fStatus::Config,
            Error::InvalidArgument(_) => C2fStatus::InvalidArgument,
            Error::Format(_) | Error::Json(_) => C2fStatus::Format,
            Error::Data(_) => C2fStatus::Data,
            Error::Io { .. } => C2fStatus::Io,
        }
    }
}

/// A loaded checkpoint.
pub struct C2fModel {
    ck: Checkpoint,
}

/// Segmentation scores in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct C2fSegReport {
    pub mof: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(C2fStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(C2fStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(C2fStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> C2fStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            C2fStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            C2fStatus::Panic
        }
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn c2f_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn c2f_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint into `*out`. Free it with [`c2f_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_load(path: *const c_char, out: *mut *mut C2fModel) -> C2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(C2fStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(C2fModel { ck }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`c2f_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_free(model: *mut C2fModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected feature dimension, 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_feat_dim(model: *const C2fModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.model.config().input_dim)
}

/// Number of action classes, 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_num_classes(model: *const C2fModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.model.config().num_classes)
}

unsafe fn probs(model: *const C2fModel, features: *const f32, frames: usize, feat_dim: usize) -> Result<(Tensor, usize), Fail> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if features.is_null() {
        return Err(null("features"));
    }
    let want = m.ck.model.config().input_dim;
    if feat_dim != want || frames == 0 {
        return Err(Fail(
            C2fStatus::Shape,
            format!("features are {frames} x {feat_dim}, model expects T x {want} with T >= 1"),
        ));
    }
    let data: Vec<f64> = slice::from_raw_parts(features, frames * feat_dim).iter().map(|&v| f64::from(v)).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Fail(C2fStatus::Data, "features contain a non-finite value".into()));
    }
    let x = Tensor::new(vec![frames, feat_dim], data)?;
    let p = predict_video(&m.ck.model, &x, &m.ck.alpha, &m.ck.augment)?;
    Ok((p, m.ck.model.config().num_classes))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(C2fStatus::Shape, format!("{what} holds {got} values, need {want}")));
    }
    Ok(())
}

/// Frame-wise class probabilities, row-major `frames × num_classes`.
///
/// # Safety
/// `features` must point to `frames * feat_dim` floats and `out` to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_predict_probs(
    model: *const C2fModel,
    features: *const f32,
    frames: usize,
    feat_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> C2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, c) = probs(model, features, frames, feat_dim)?;
        check_len(out_len, frames * c, "out")?;
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(p.data());
        Ok(())
    })
}

/// Frame-wise action labels.
///
/// # Safety
/// `features` must point to `frames * feat_dim` floats and `labels` to
/// `frames` writable integers.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_segment(
    model: *const C2fModel,
    features: *const f32,
    frames: usize,
    feat_dim: usize,
    labels: *mut u32,
) -> C2fStatus {
    guard(|| {
        if labels.is_null() {
            return Err(null("labels"));
        }
        let (p, _) = probs(model, features, frames, feat_dim)?;
        for (o, y) in slice::from_raw_parts_mut(labels, frames).iter_mut().zip(predict(&p)) {
            *o = y as u32;
        }
        Ok(())
    })
}

/// Scores one predicted labeling against ground truth.
///
/// # Safety
/// `pred` and `gt` must each point to `len` integers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c2f_segment_metrics(pred: *const u32, gt: *const u32, len: usize, out: *mut C2fSegReport) -> C2fStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("pred, gt or out"));
        }
        let p: Vec<usize> = slice::from_raw_parts(pred, len).iter().map(|&v| v as usize).collect();
        let g: Vec<usize> = slice::from_raw_parts(gt, len).iter().map(|&v| v as usize).collect();
        let r = evaluate([(p.as_slice(), g.as_slice())])?;
        *out = C2fSegReport {
            mof: r.mof,
            edit: r.edit,
            f1_10: r.f1_10,
            f1_25: r.f1_25,
            f1_50: r.f1_50,
        };
        Ok(())
    })
}
