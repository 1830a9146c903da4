//! C interface: load a checkpoint and run the model, solve assignment
//! problems, and accumulate panoptic quality counts.
//!
//! Every fallible call returns a [`CmfStatus`]. On failure the message is
//! kept per thread and can be read with [`cmf_last_error`]. Handles are
//! opaque and must be released with their matching `_free` call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ndarray::Array2;

use maskcl::formats::decode_checkpoint;
use maskcl::mask::BinaryMask;
use maskcl::metrics::{accumulate_pq, PqStats};
use maskcl::model::{predict, MaskActivation, ModelParams};
use maskcl::objective::solve_assignment;
use maskcl::synthdata::{ClassId, GtSegment, Image};
use maskcl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    Integrity = 7,
    Capacity = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CmfStatus, msg: impl Into<String>) -> CmfStatus {
    set_error(msg.into());
    status
}

fn status_of(err: &Error) -> CmfStatus {
    match err {
        Error::Config(_) | Error::Placement { .. } => CmfStatus::InvalidArgument,
        Error::Integrity(_) => CmfStatus::Integrity,
        Error::Shape { .. } => CmfStatus::Shape,
        Error::Capacity { .. } => CmfStatus::Capacity,
        Error::Numeric { .. } => CmfStatus::Numeric,
        Error::Format(_) | Error::Json(_) => CmfStatus::Format,
        Error::Io(_) => CmfStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), CmfStatus>) -> CmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CmfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: maskcl::Result<T>) -> Result<T, CmfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), CmfStatus> {
    if p.is_null() {
        Err(fail(CmfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Slice from a C pointer; a null pointer is accepted only for length 0.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], CmfStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], CmfStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), CmfStatus> {
    if got == want {
        Ok(())
    } else {
        Err(fail(CmfStatus::Shape, format!("{what} has length {got}, expected {want}")))
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opaque trained model.
pub struct CmfModel {
    params: ModelParams,
}

/// Shape information of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CmfModelInfo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub queries: usize,
    /// Classifier rows including "no object" at row 0.
    pub outputs: usize,
    /// 1 when masks are a per-pixel softmax over queries.
    pub softmax_masks: u8,
}

/// Decodes a checkpoint held in memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` to writable storage
/// for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut CmfModel) -> CmfStatus {
    guard(|| {
        non_null(out, "out")?;
        let buf = input(bytes, len, "bytes")?;
        let params = lift(decode_checkpoint(buf))?;
        *out = Box::into_raw(Box::new(CmfModel { params }));
        Ok(())
    })
}

/// Reads and decodes a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_load(path: *const c_char, out: *mut *mut CmfModel) -> CmfStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CmfStatus::InvalidArgument, "path is not UTF-8"))?;
        let buf = std::fs::read(path).map_err(|e| fail(CmfStatus::Io, format!("{path}: {e}")))?;
        let params = lift(decode_checkpoint(&buf))?;
        *out = Box::into_raw(Box::new(CmfModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a load call and not have been freed. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_free(model: *mut CmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_info(model: *const CmfModel, info: *mut CmfModelInfo) -> CmfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(info, "info")?;
        let p = &(*model).params;
        *info = CmfModelInfo {
            channels: p.config.channels,
            height: p.config.height,
            width: p.config.width,
            queries: p.config.queries,
            outputs: p.num_outputs(),
            softmax_masks: (p.config.mask_activation == MaskActivation::Softmax) as u8,
        };
        Ok(())
    })
}

/// Class id of each classifier row after "no object"; `len` must equal
/// `outputs - 1`.
///
/// # Safety
/// `ids` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_classes(model: *const CmfModel, ids: *mut u16, len: usize) -> CmfStatus {
    guard(|| {
        non_null(model, "model")?;
        let classes = &(*model).params.classes;
        check_len(len, classes.len(), "ids")?;
        output(ids, len, "ids")?.copy_from_slice(classes);
        Ok(())
    })
}

/// Runs one image through the model.
///
/// `image` is channel-major, `channels * height * width` values.
/// `class_probs` receives `queries * outputs` values, row-major by query,
/// and `masks` receives `queries * height * width` values.
///
/// # Safety
/// Every pointer must reference the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn cmf_model_forward(
    model: *const CmfModel,
    image: *const f64,
    image_len: usize,
    class_probs: *mut f64,
    class_probs_len: usize,
    masks: *mut f64,
    masks_len: usize,
) -> CmfStatus {
    guard(|| {
        non_null(model, "model")?;
        let p = &(*model).params;
        let c = p.config;
        check_len(image_len, c.channels * c.height * c.width, "image")?;
        check_len(class_probs_len, c.queries * p.num_outputs(), "class_probs")?;
        check_len(masks_len, c.queries * c.height * c.width, "masks")?;
        let img = Image {
            channels: c.channels,
            height: c.height,
            width: c.width,
            data: input(image, image_len, "image")?.to_vec(),
        };
        let preds = lift(predict(p, &img))?;
        for (dst, src) in output(class_probs, class_probs_len, "class_probs")?.iter_mut().zip(preds.class_probs.iter()) {
            *dst = *src;
        }
        for (dst, src) in output(masks, masks_len, "masks")?.iter_mut().zip(preds.masks.iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Minimum-cost assignment of every row of a `rows x cols` cost matrix
/// (row-major, `rows <= cols`) to a distinct column. Ties resolve to the
/// lexicographically smallest assignment.
///
/// # Safety
/// `cost` must hold `rows * cols` values and `assignment` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn cmf_hungarian(cost: *const f64, rows: usize, cols: usize, assignment: *mut usize) -> CmfStatus {
    guard(|| {
        let values = input(cost, rows * cols, "cost")?;
        let m = Array2::from_shape_vec((rows, cols), values.to_vec()).map_err(|e| fail(CmfStatus::Shape, e.to_string()))?;
        let a = lift(solve_assignment(&m))?;
        output(assignment, rows, "assignment")?.copy_from_slice(&a);
        Ok(())
    })
}

/// Opaque panoptic quality accumulator.
pub struct CmfPqStats {
    stats: PqStats,
}

/// Counts for one class. Ratios are NaN where undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CmfClassPq {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[no_mangle]
pub extern "C" fn cmf_pq_new() -> *mut CmfPqStats {
    Box::into_raw(Box::new(CmfPqStats { stats: PqStats::default() }))
}

/// # Safety
/// `stats` must come from [`cmf_pq_new`]. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cmf_pq_free(stats: *mut CmfPqStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Segments of an id map: pixel value `s > 0` belongs to segment `s - 1`.
fn segments(ids: &[u32], classes: &[u16], height: usize, width: usize, what: &str) -> Result<Vec<GtSegment>, CmfStatus> {
    let mut bits = vec![vec![false; height * width]; classes.len()];
    for (px, &id) in ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let seg = bits
            .get_mut(id as usize - 1)
            .ok_or_else(|| fail(CmfStatus::InvalidArgument, format!("{what} id {id} exceeds {} segments", classes.len())))?;
        seg[px] = true;
    }
    bits.into_iter()
        .zip(classes)
        .filter(|(b, _)| b.iter().any(|&x| x))
        .map(|(b, &class_id)| {
            Ok(GtSegment {
                class_id: class_id as ClassId,
                mask: lift(BinaryMask::from_bits(height, width, b))?,
            })
        })
        .collect()
}

/// Adds one image. Each id map holds `height * width` values, 0 for void
/// and `s` for segment `s - 1`, whose class is `*_classes[s - 1]`.
///
/// # Safety
/// Pointers must reference the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn cmf_pq_accumulate(
    stats: *mut CmfPqStats,
    height: usize,
    width: usize,
    pred_ids: *const u32,
    pred_classes: *const u16,
    pred_count: usize,
    gt_ids: *const u32,
    gt_classes: *const u16,
    gt_count: usize,
) -> CmfStatus {
    guard(|| {
        non_null(stats, "stats")?;
        let pixels = height * width;
        let pred = segments(
            input(pred_ids, pixels, "pred_ids")?,
            input(pred_classes, pred_count, "pred_classes")?,
            height,
            width,
            "pred",
        )?;
        let gt = segments(
            input(gt_ids, pixels, "gt_ids")?,
            input(gt_classes, gt_count, "gt_classes")?,
            height,
            width,
            "gt",
        )?;
        lift(accumulate_pq(&pred, &gt, &mut (*stats).stats))
    })
}

/// # Safety
/// `stats` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmf_pq_class(stats: *const CmfPqStats, class_id: u16, out: *mut CmfClassPq) -> CmfStatus {
    guard(|| {
        non_null(stats, "stats")?;
        non_null(out, "out")?;
        let s = (*stats).stats.get(class_id);
        *out = CmfClassPq {
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
            iou_sum: s.iou_sum,
            pq: s.pq().unwrap_or(f64::NAN),
            sq: s.sq().unwrap_or(f64::NAN),
            rq: s.rq().unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
