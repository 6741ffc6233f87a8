//! C ABI over a trained localization model plus the box utilities.
//!
//! Every function returns a [`WslocStatus`]; on failure a message is kept per
//! thread and read with [`wsloc_last_error`]. Output pointers are written
//! only on success. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::Array3;
use wsloc::evaluation::nms;
use wsloc::features::FeatureMap;
use wsloc::geometry::{iou, BBox};
use wsloc::model::checkpoint::load_checkpoint;
use wsloc::model::{FeatureSource, Model, ModelInput};
use wsloc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WslocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Corners in pixels, `x1 < x2`, `y1 < y2`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WslocBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Opaque handle to a loaded model.
pub struct WslocModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(WslocStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => WslocStatus::Io,
            Error::Parse { .. } | Error::TensorFormat { .. } | Error::Image { .. } | Error::Config { .. } => WslocStatus::Format,
            Error::Shape(_) | Error::RegionOutOfGrid(_) => WslocStatus::Shape,
            Error::NonFinite(_) => WslocStatus::NonFinite,
            _ => WslocStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: WslocStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WslocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WslocStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WslocStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(WslocStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null-checked and point to `n` readable values.
unsafe fn view<'a, T>(p: *const T, n: usize) -> &'a [T] {
    if n == 0 {
        &[]
    } else {
        slice::from_raw_parts(p, n)
    }
}

fn to_bbox(b: &WslocBox) -> Result<BBox, Failure> {
    BBox::new(b.x1, b.y1, b.x2, b.y2).ok_or_else(|| {
        fail(
            WslocStatus::InvalidArgument,
            format!("invalid box ({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2),
        )
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn wsloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint and its `.meta` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn wsloc_model_load(path: *const c_char, out: *mut *mut WslocModel) -> WslocStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(WslocStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(WslocModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`wsloc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wsloc_model_free(model: *mut WslocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Class count, input channels (raster or feature) and feature stride.
/// `precomputed` is 1 when the model takes feature maps instead of rasters.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsloc_model_info(
    model: *const WslocModel,
    classes: *mut usize,
    input_channels: *mut usize,
    stride: *mut usize,
    precomputed: *mut i32,
) -> WslocStatus {
    guard(|| {
        non_null(model, "model")?;
        for (p, name) in [(classes, "classes"), (input_channels, "input_channels"), (stride, "stride")] {
            non_null(p, name)?;
        }
        non_null(precomputed, "precomputed")?;
        let cfg = &(*model).model.config;
        let (ch, pre) = match &cfg.features {
            FeatureSource::Conv(c) => (c.in_channels, 0),
            FeatureSource::Precomputed { channels, .. } => (*channels, 1),
        };
        *classes = cfg.classes;
        *input_channels = ch;
        *stride = cfg.features.stride();
        *precomputed = pre;
        Ok(())
    })
}

unsafe fn score(
    model: *const WslocModel,
    input: ModelInput,
    rois: *const WslocBox,
    n_rois: usize,
    scores: *mut f64,
    scores_len: usize,
    image_scores: *mut f64,
) -> Result<(), Failure> {
    non_null(model, "model")?;
    non_null(rois, "rois")?;
    non_null(scores, "scores")?;
    let m = &(*model).model;
    let c = m.config.classes;
    if scores_len < n_rois * c {
        return Err(fail(
            WslocStatus::BufferTooSmall,
            format!("scores needs {} values, got {scores_len}", n_rois * c),
        ));
    }
    let boxes = view(rois, n_rois).iter().map(to_bbox).collect::<Result<Vec<_>, _>>()?;
    let out = m.forward(&input, &boxes)?;
    let dst = slice::from_raw_parts_mut(scores, n_rois * c);
    for (d, s) in dst.iter_mut().zip(out.final_scores.iter()) {
        *d = *s;
    }
    if !image_scores.is_null() {
        slice::from_raw_parts_mut(image_scores, c).copy_from_slice(out.image_scores.as_slice().expect("contiguous"));
    }
    Ok(())
}

/// Scores `n_rois` boxes on a planar `channels x height x width` raster with
/// values in `[0, 1]`. Writes the `n_rois x classes` row-major fused scores
/// into `scores` and, when `image_scores` is non-null, the `classes`
/// image-level scores.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wsloc_model_score_image(
    model: *const WslocModel,
    pixels: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    rois: *const WslocBox,
    n_rois: usize,
    scores: *mut f64,
    scores_len: usize,
    image_scores: *mut f64,
) -> WslocStatus {
    guard(|| {
        non_null(pixels, "pixels")?;
        let data = view(pixels, channels * height * width).to_vec();
        let img = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| fail(WslocStatus::Shape, e.to_string()))?;
        score(model, ModelInput::Image(img), rois, n_rois, scores, scores_len, image_scores)
    })
}

/// As [`wsloc_model_score_image`] for a planar `channels x height x width`
/// feature map whose cells cover `stride` pixels.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wsloc_model_score_features(
    model: *const WslocModel,
    features: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    rois: *const WslocBox,
    n_rois: usize,
    scores: *mut f64,
    scores_len: usize,
    image_scores: *mut f64,
) -> WslocStatus {
    guard(|| {
        non_null(features, "features")?;
        if stride == 0 {
            return Err(fail(WslocStatus::InvalidArgument, "stride must be positive"));
        }
        let data = view(features, channels * height * width).to_vec();
        let fm = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| fail(WslocStatus::Shape, e.to_string()))?;
        let input = ModelInput::Features(FeatureMap::new(fm, stride));
        score(model, input, rois, n_rois, scores, scores_len, image_scores)
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a`, `b` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wsloc_iou(a: *const WslocBox, b: *const WslocBox, out: *mut f64) -> WslocStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = iou(&to_bbox(&*a)?, &to_bbox(&*b)?);
        Ok(())
    })
}

/// Greedy non-maximum suppression. Writes the kept indices, best score
/// first, into `keep` (capacity `n`) and their count into `n_keep`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` values, `keep` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn wsloc_nms(
    boxes: *const WslocBox,
    scores: *const f64,
    n: usize,
    threshold: f64,
    keep: *mut usize,
    n_keep: *mut usize,
) -> WslocStatus {
    guard(|| {
        non_null(n_keep, "n_keep")?;
        if n > 0 {
            non_null(boxes, "boxes")?;
            non_null(scores, "scores")?;
            non_null(keep, "keep")?;
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(fail(WslocStatus::InvalidArgument, format!("threshold {threshold} is not in [0, 1]")));
        }
        let b = view(boxes, n).iter().map(to_bbox).collect::<Result<Vec<_>, _>>()?;
        let s = view(scores, n);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(fail(WslocStatus::NonFinite, "scores must be finite"));
        }
        let kept = nms(&b, s, threshold);
        if n > 0 {
            ptr::copy_nonoverlapping(kept.as_ptr(), keep, kept.len());
        }
        *n_keep = kept.len();
        Ok(())
    })
}
