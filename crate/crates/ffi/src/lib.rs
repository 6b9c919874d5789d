//! C ABI over the adverx scorer.
//!
//! A model is loaded from an archive into an opaque handle and then used to
//! score patch batches or whole images. Every call returns an
//! [`AdverxStatus`]; on failure a message is kept per thread and can be read
//! with [`adverx_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use adverx::ingest::{load_scan_auto, LoadOptions, Scan};
use adverx::model::AdverxModel as Model;
use adverx::patching::PatchBatch;
use adverx::persistence::load_model;
use adverx::scoring::{patch_ood_scores, score_image, ScoreOptions};
use adverx::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdverxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Unreadable, corrupt or mismatched model archive.
    Archive = 4,
    /// Unreadable or unsupported image data.
    Data = 5,
    /// Wrong sizes, too few patches, or a ROI too small for a patch.
    Shape = 6,
    Numerical = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct AdverxModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdverxStatus {
    match e {
        Error::Io { .. } => AdverxStatus::Io,
        Error::Format(_) | Error::Schema(_) | Error::CorruptArchive(_) | Error::Json(_) => AdverxStatus::Archive,
        Error::UnsupportedInput(_) | Error::CorruptPixelData(_) | Error::Image(_) | Error::Dicom(_) => AdverxStatus::Data,
        Error::Shape(_) | Error::BatchTooSmall(_) | Error::RoiTooSmall { .. } | Error::DegenerateRoi(_) => {
            AdverxStatus::Shape
        }
        Error::Numerical(_) => AdverxStatus::Numerical,
        Error::Internal(_) => AdverxStatus::Internal,
        _ => AdverxStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), AdverxStatus>) -> AdverxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdverxStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            AdverxStatus::Panic
        }
    }
}

fn fail(e: Error) -> AdverxStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> AdverxStatus {
    set_error(format!("{what} is null"));
    AdverxStatus::NullPointer
}

unsafe fn model_ref<'a>(m: *const AdverxModel) -> Result<&'a Model<f32>, AdverxStatus> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, AdverxStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| {
        set_error("path is not valid UTF-8".into());
        AdverxStatus::InvalidArgument
    })
}

fn options(k: usize, margin: f64) -> ScoreOptions {
    ScoreOptions {
        k,
        margin,
        force_k: false,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adverx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adverx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a full or discriminator-only archive.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adverx_model_load(path: *const c_char, out: *mut *mut AdverxModel) -> AdverxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = load_model(path, None).map_err(fail)?;
        *out = Box::into_raw(Box::new(AdverxModel { inner }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`adverx_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adverx_model_free(model: *mut AdverxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square patches the model expects.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adverx_model_patch_size(model: *const AdverxModel, out: *mut usize) -> AdverxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.config.patch_size;
        Ok(())
    })
}

/// Number of discriminator parameters.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adverx_model_discriminator_params(model: *const AdverxModel, out: *mut usize) -> AdverxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.parameter_count().discriminator;
        Ok(())
    })
}

/// Per-patch OOD scores (`1 - P(real)`) for `k` row-major patches of
/// `s * s` values in `[0, 1]`, evaluated as one batch.
///
/// # Safety
/// `patches` must hold `k * s * s` floats and `out_scores` room for `k`
/// doubles, where `s` is the model's patch size.
#[no_mangle]
pub unsafe extern "C" fn adverx_score_patches(
    model: *const AdverxModel,
    patches: *const f32,
    k: usize,
    out_scores: *mut f64,
) -> AdverxStatus {
    guard(|| {
        let m = model_ref(model)?;
        if patches.is_null() {
            return Err(null("patches"));
        }
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let s = m.config.patch_size;
        let data = std::slice::from_raw_parts(patches, k * s * s).to_vec();
        let batch = PatchBatch::from_raw(data, s, "ffi").map_err(fail)?;
        let scores = patch_ood_scores(&batch, m).map_err(fail)?;
        std::slice::from_raw_parts_mut(out_scores, k).copy_from_slice(&scores);
        Ok(())
    })
}

/// Image-level OOD score of a row-major grayscale image with values in
/// `[0, 1]`: the mean over `k` patches drawn from the central region.
///
/// # Safety
/// `pixels` must hold `height * width` floats and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn adverx_score_image(
    model: *const AdverxModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    k: usize,
    margin: f64,
    seed: u64,
    out: *mut f64,
) -> AdverxStatus {
    guard(|| {
        let m = model_ref(model)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let n = height.checked_mul(width).ok_or_else(|| fail(Error::Shape("image size overflows".into())))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let scan = Scan::new(data, height, width, 16).map_err(fail)?;
        *out = score_image(&scan, m, &options(k, margin), seed).map_err(fail)?.value;
        Ok(())
    })
}

/// Load an image file (PNG, 16-bit PNG or DICOM) and score it like
/// [`adverx_score_image`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn adverx_score_file(
    model: *const AdverxModel,
    path: *const c_char,
    k: usize,
    margin: f64,
    seed: u64,
    out: *mut f64,
) -> AdverxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scan = load_scan_auto(path, &LoadOptions::default()).map_err(fail)?;
        *out = score_image(&scan, m, &options(k, margin), seed).map_err(fail)?.value;
        Ok(())
    })
}
