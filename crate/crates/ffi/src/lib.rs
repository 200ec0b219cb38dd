//! C interface to the vig-core library.
//!
//! Models are handed out as opaque `VigModel` pointers and must be released with
//! [`vig_model_free`]. Every fallible function returns a [`VigStatus`]; on failure a
//! description is available from [`vig_last_error`] on the same thread.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the access described on each function.
//! Null pointers are detected and reported as `VIG_STATUS_NULL_POINTER`. A model handle
//! may be shared between threads for read-only calls but must not be freed while in use.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use vig::analysis::count_macs;
use vig::model::{preset, ConfigFile, Model};
use vig::{Tensor, VigError};

/// Outcome of an API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VigStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Index = 5,
    Format = 6,
    Io = 7,
    /// An output buffer was too small; the required length was still written.
    BufferTooSmall = 8,
    NonFinite = 9,
    Runtime = 10,
    Panic = 11,
}

/// Opaque model handle.
pub struct VigModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: VigStatus, msg: impl Into<String>) -> VigStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &VigError) -> VigStatus {
    match e {
        VigError::Config { .. } => VigStatus::Config,
        VigError::Dimension(_) | VigError::HeadSplit { .. } | VigError::InsufficientNodes { .. } => {
            VigStatus::Dimension
        }
        VigError::Index(_) => VigStatus::Index,
        VigError::Format(_) | VigError::Json(_) => VigStatus::Format,
        VigError::Io(_) => VigStatus::Io,
        VigError::NonFinite(_) | VigError::Divergence(_) => VigStatus::NonFinite,
        _ => VigStatus::Runtime,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), VigStatus>) -> VigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VigStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(VigStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, VigStatus>;
}

impl<T> OrStatus<T> for vig::Result<T> {
    fn or_status(self) -> Result<T, VigStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, VigStatus> {
    if p.is_null() {
        return Err(fail(VigStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VigStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const VigModel) -> Result<&'a Model<f32>, VigStatus> {
    p.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(VigStatus::NullPointer, "model is null"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, VigStatus> {
    p.as_mut().ok_or_else(|| fail(VigStatus::NullPointer, format!("{what} is null")))
}

fn hand_out(model: Model<f32>, out: &mut *mut VigModel) {
    *out = Box::into_raw(Box::new(VigModel { inner: model }));
}

/// Message of the last failed call on this thread, or null if none failed yet.
///
/// The string stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a named preset with weights drawn from `seed`.
///
/// # Safety
///
/// `name` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn vig_model_from_preset(name: *const c_char, seed: u64, out: *mut *mut VigModel) -> VigStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        let cfg = preset(name).ok_or_else(|| fail(VigStatus::Config, format!("unknown preset `{name}`")))?;
        hand_out(Model::new(cfg, seed).or_status()?, out);
        Ok(())
    })
}

/// Build a model from a JSON config document (a preset plus overrides, or a full config).
///
/// # Safety
///
/// `json` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn vig_model_from_config(json: *const c_char, seed: u64, out: *mut *mut VigModel) -> VigStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let cfg = ConfigFile::parse(json).and_then(ConfigFile::resolve).or_status()?;
        hand_out(Model::new(cfg, seed).or_status()?, out);
        Ok(())
    })
}

/// Load a checkpoint archive together with its `.json` manifest.
///
/// # Safety
///
/// `path` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn vig_model_load(path: *const c_char, out: *mut *mut VigModel) -> VigStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        hand_out(Model::load(path).or_status()?, out);
        Ok(())
    })
}

/// Write a checkpoint archive and its manifest.
///
/// # Safety
///
/// `model` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vig_model_save(model: *const VigModel, path: *const c_char) -> VigStatus {
    guard(|| {
        let m = model_arg(model)?;
        m.save(str_arg(path, "path")?).or_status()?;
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
///
/// `model` must be null or a live handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vig_model_free(model: *mut VigModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input height, width and number of output classes.
///
/// # Safety
///
/// `model` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vig_model_shape(
    model: *const VigModel,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
) -> VigStatus {
    guard(|| {
        let cfg = model_arg(model)?.config();
        *out_arg(height, "height")? = cfg.image_size[0];
        *out_arg(width, "width")? = cfg.image_size[1];
        *out_arg(num_classes, "num_classes")? = cfg.num_classes;
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
///
/// `model` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vig_model_param_count(model: *const VigModel, out: *mut u64) -> VigStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.param_count() as u64;
        Ok(())
    })
}

/// Multiply-accumulates of one forward pass at `height` × `width`.
///
/// # Safety
///
/// `model` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vig_model_mac_count(
    model: *const VigModel,
    height: usize,
    width: usize,
    out: *mut u64,
) -> VigStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(out, "out")? = count_macs(m, [height, width]).or_status()?;
        Ok(())
    })
}

/// Eval-mode logits for `batch` normalized images laid out `[batch][height][width][3]`.
///
/// `logits` receives `batch × num_classes` values.
///
/// # Safety
///
/// `images` must hold `batch·height·width·3` floats and `logits` room for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn vig_model_predict(
    model: *const VigModel,
    images: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> VigStatus {
    guard(|| {
        let m = model_arg(model)?;
        if images.is_null() || logits.is_null() {
            return Err(fail(VigStatus::NullPointer, "images or logits is null"));
        }
        let [h, w] = m.config().image_size;
        let need = batch * m.config().num_classes;
        if logits_len < need {
            return Err(fail(VigStatus::BufferTooSmall, format!("logits needs {need} floats, got {logits_len}")));
        }
        let pixels = slice::from_raw_parts(images, batch * h * w * 3).to_vec();
        let x = Tensor::new([batch, h, w, 3], pixels).or_status()?;
        let y = m.predict(&x).or_status()?;
        slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Neighbor table of the graph built at the 1-based block `layer` for one image.
///
/// Row `i` of the `num_nodes × k` table lists the neighbors of node `i` nearest first.
/// When `neighbors_len` is too small nothing is copied, `num_nodes` and `k` are still
/// written, and `VIG_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
///
/// `image` must hold `height·width·3` floats, `neighbors` room for `neighbors_len`
/// values (it may be null when `neighbors_len` is 0), and the out pointers be writable.
#[no_mangle]
pub unsafe extern "C" fn vig_model_graph(
    model: *const VigModel,
    image: *const f32,
    layer: usize,
    neighbors: *mut u32,
    neighbors_len: usize,
    num_nodes: *mut usize,
    k: *mut usize,
) -> VigStatus {
    guard(|| {
        let m = model_arg(model)?;
        if image.is_null() {
            return Err(fail(VigStatus::NullPointer, "image is null"));
        }
        let num_nodes = out_arg(num_nodes, "num_nodes")?;
        let k = out_arg(k, "k")?;
        m.block_grid(layer).or_status()?;
        let [h, w] = m.config().image_size;
        let x = Tensor::new([1, h, w, 3], slice::from_raw_parts(image, h * w * 3).to_vec()).or_status()?;
        let trace = m.trace(&x).or_status()?;
        let g = &trace.graphs[layer - 1][0];
        *num_nodes = g.num_nodes();
        *k = g.k();
        let table = g.neighbor_table();
        if neighbors_len < table.len() {
            return Err(fail(
                VigStatus::BufferTooSmall,
                format!("neighbor table needs {} entries, got {neighbors_len}", table.len()),
            ));
        }
        if neighbors.is_null() {
            return Err(fail(VigStatus::NullPointer, "neighbors is null"));
        }
        slice::from_raw_parts_mut(neighbors, table.len()).copy_from_slice(table);
        Ok(())
    })
}
