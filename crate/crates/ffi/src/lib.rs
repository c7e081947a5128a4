#![allow(clippy::missing_safety_doc)]
//! C ABI for `ptopk`.
//!
//! Every fallible function returns a `PtopkStatus`; on failure the
//! message is available from `ptopk_last_error` on the same thread until
//! the next failing call. Buffers are caller-allocated with sizes stated
//! per function. Handles are opaque and released with their `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ptopk::patches::{extract_scan, PatchGeometry};
use ptopk::perturbed::{perturbed_topk_backward, perturbed_topk_forward, sigma_schedule, PerturbedConfig, PerturbedContext};
use ptopk::pipeline::{load_checkpoint, Model};
use ptopk::topk::{hard_topk_indices, normalize_scores, IndicatorMatrix};
use ptopk::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PtopkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Io = 6,
    Config = 7,
    Internal = 8,
    Panic = 9,
}

/// Saved noise and selections of one perturbed forward.
pub struct PtopkPerturbed(PerturbedContext);

/// A dense f32 tensor.
pub struct PtopkTensor(Tensor);

/// A trained model loaded from a checkpoint directory.
pub struct PtopkModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PtopkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => PtopkStatus::Shape,
            Error::InvalidArgument(_) => PtopkStatus::InvalidArgument,
            Error::NonFinite(_) | Error::Diverged { .. } => PtopkStatus::NonFinite,
            Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Truncated { .. } => PtopkStatus::Format,
            Error::Config(_) => PtopkStatus::Config,
            Error::Io(_) => PtopkStatus::Io,
            _ => PtopkStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PtopkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PtopkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside ptopk".into());
            PtopkStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PtopkStatus::NullPointer, format!("{name} is NULL"))
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PtopkStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn ptopk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ptopk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Writes the `k` indices of the largest scores, ascending, to
/// `out_indices`. Ties go to the lower index.
#[no_mangle]
pub unsafe extern "C" fn ptopk_hard_topk(scores: *const f32, n: usize, k: usize, out_indices: *mut usize) -> PtopkStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let idx = hard_topk_indices(s, k)?;
        output(out_indices, k, "out_indices")?.copy_from_slice(idx.as_slice());
        Ok(())
    })
}

/// Min-max normalization `(s - min) / (max - min + eps)` into `out` (length `n`).
#[no_mangle]
pub unsafe extern "C" fn ptopk_normalize_scores(scores: *const f32, n: usize, eps: f32, out: *mut f32) -> PtopkStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let v = normalize_scores(s, eps)?;
        output(out, n, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// σ at `step` of a linear decay from `sigma0` to 0 over `total_steps`.
#[no_mangle]
pub unsafe extern "C" fn ptopk_sigma_schedule(step: usize, total_steps: usize, sigma0: f32, out: *mut f32) -> PtopkStatus {
    guard(|| {
        let v = sigma_schedule(step, total_steps, sigma0)?;
        *output(out, 1, "out")?.first_mut().expect("length 1") = v;
        Ok(())
    })
}

/// Perturbed Top-K forward. Writes the `n×k` soft indicator (row-major)
/// to `out_y` and a context for the backward to `*out_ctx`.
#[no_mangle]
pub unsafe extern "C" fn ptopk_perturbed_forward(
    scores: *const f32,
    n: usize,
    k: usize,
    samples: usize,
    sigma: f32,
    seed: u64,
    out_y: *mut f32,
    out_ctx: *mut *mut PtopkPerturbed,
) -> PtopkStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        if out_ctx.is_null() {
            return Err(null("out_ctx"));
        }
        let y_out = output(out_y, n * k, "out_y")?;
        let (y, ctx) = perturbed_topk_forward(s, k, &PerturbedConfig { n: samples, sigma, seed })?;
        y_out.copy_from_slice(y.tensor().data());
        *out_ctx = Box::into_raw(Box::new(PtopkPerturbed(ctx)));
        Ok(())
    })
}

/// Gradient wrt the scores (length `n`) given the `n×k` gradient wrt the
/// indicator.
#[no_mangle]
pub unsafe extern "C" fn ptopk_perturbed_backward(
    ctx: *const PtopkPerturbed,
    grad_y: *const f32,
    out_grad_scores: *mut f32,
) -> PtopkStatus {
    guard(|| {
        let ctx = &handle(ctx, "ctx")?.0;
        let (n, k) = (ctx.num_items(), ctx.k());
        let g = Tensor::new(vec![n, k], input(grad_y, n * k, "grad_y")?.to_vec())?;
        let out = perturbed_topk_backward(ctx, &g)?;
        output(out_grad_scores, n, "out_grad_scores")?.copy_from_slice(out.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptopk_perturbed_free(ctx: *mut PtopkPerturbed) {
    if !ctx.is_null() {
        drop(Box::from_raw(ctx));
    }
}

/// Patches `Yᵀ·P` of an `h×w×c` image (row-major HWC) for square patches
/// of side `patch` on a grid with step `stride`. `y` is `n×k` with `n` the
/// number of grid cells; `out` receives `k×patch×patch×c` values.
#[no_mangle]
pub unsafe extern "C" fn ptopk_extract_patches(
    image: *const f32,
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
    stride: usize,
    y: *const f32,
    n: usize,
    k: usize,
    out: *mut f32,
) -> PtopkStatus {
    guard(|| {
        let geom = PatchGeometry::new((h, w, c), (patch, patch), (stride, stride))?;
        let img = Tensor::new(vec![h, w, c], input(image, h * w * c, "image")?.to_vec())?;
        let y = Tensor::new(vec![n, k], input(y, n * k, "y")?.to_vec())?;
        let patches = extract_scan(&img, &y, &geom)?;
        output(out, k * geom.patch_len(), "out")?.copy_from_slice(patches.data());
        Ok(())
    })
}

/// Reads a PTKT tensor file.
#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_load(path: *const c_char, out: *mut *mut PtopkTensor) -> PtopkStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = ptopk::ptkt::load(path)?;
        *out = Box::into_raw(Box::new(PtopkTensor(t)));
        Ok(())
    })
}

/// Number of dimensions; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_rank(t: *const PtopkTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Number of elements; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_numel(t: *const PtopkTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Copies the shape into `out_dims`, which holds `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_shape(t: *const PtopkTensor, out_dims: *mut usize, capacity: usize) -> PtopkStatus {
    guard(|| {
        let shape = handle(t, "tensor")?.0.shape();
        if capacity < shape.len() {
            return Err(Failure(
                PtopkStatus::Shape,
                format!("rank {} needs {} dims, capacity {capacity}", shape.len(), shape.len()),
            ));
        }
        output(out_dims, shape.len(), "out_dims")?.copy_from_slice(shape);
        Ok(())
    })
}

/// Row-major data, valid until the handle is freed; NULL for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_data(t: *const PtopkTensor) -> *const f32 {
    t.as_ref().map_or(std::ptr::null(), |t| t.0.data().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn ptopk_tensor_free(t: *mut PtopkTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Loads a checkpoint directory written by `ptopk train`.
#[no_mangle]
pub unsafe extern "C" fn ptopk_model_load(dir: *const c_char, out: *mut *mut PtopkModel) -> PtopkStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = load_checkpoint(dir)?;
        *out = Box::into_raw(Box::new(PtopkModel(m)));
        Ok(())
    })
}

/// Writes `[height, width, channels]` of the expected image.
#[no_mangle]
pub unsafe extern "C" fn ptopk_model_input_shape(model: *const PtopkModel, out_hwc: *mut usize) -> PtopkStatus {
    guard(|| {
        let cfg = handle(model, "model")?.0.config();
        output(out_hwc, 3, "out_hwc")?.copy_from_slice(&[cfg.image_h, cfg.image_w, cfg.channels]);
        Ok(())
    })
}

/// Number of logits; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ptopk_model_num_classes(model: *const PtopkModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().classes)
}

/// Patches selected per image; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn ptopk_model_k(model: *const PtopkModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().k)
}

/// Hard Top-K inference on one `h×w×c` image of `len` values. Writes
/// `num_classes` logits, the predicted class, and, when `out_patches` is
/// not NULL, the `k` selected patch indices in ascending order.
#[no_mangle]
pub unsafe extern "C" fn ptopk_model_predict(
    model: *const PtopkModel,
    image: *const f32,
    len: usize,
    out_logits: *mut f32,
    out_class: *mut usize,
    out_patches: *mut usize,
) -> PtopkStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let cfg = m.config();
        let shape = vec![cfg.image_h, cfg.image_w, cfg.channels];
        if len != shape.iter().product::<usize>() {
            return Err(Failure(
                PtopkStatus::Shape,
                format!("image has {len} values, model expects {}×{}×{}", shape[0], shape[1], shape[2]),
            ));
        }
        let img = Tensor::new(shape, input(image, len, "image")?.to_vec())?;
        let pred = m.predict(&img)?;
        output(out_logits, cfg.classes, "out_logits")?.copy_from_slice(pred.logits.data());
        *output(out_class, 1, "out_class")?.first_mut().expect("length 1") = pred.class();
        if !out_patches.is_null() {
            let picks = IndicatorMatrix::new(pred.y, 0.0)?.column_argmax();
            output(out_patches, cfg.k, "out_patches")?.copy_from_slice(&picks);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ptopk_model_free(model: *mut PtopkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
