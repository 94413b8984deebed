//! C ABI over the `dri` library.
//!
//! Every fallible call returns a [`DriStatus`]; on failure the message is
//! kept per thread and read back with [`dri_last_error`]. Models are opaque
//! [`DriModel`] handles released with [`dri_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dri::cli::restore;
use dri::config::RunConfig;
use dri::error::Error;
use dri::model::{trainable_param_count, ReidModel, Sample};
use dri::param::ParamStore;
use dri::tensor::Tensor;

const EMBED_CHUNK: usize = 32;

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriStatus {
    Ok = 0,
    Config = 1,
    Plan = 2,
    Contract = 3,
    State = 4,
    Dimension = 5,
    Input = 6,
    Data = 7,
    Parse = 8,
    Protocol = 9,
    Io = 10,
    Numeric = 11,
    NullArgument = 12,
    InvalidUtf8 = 13,
    Panic = 14,
}

impl From<&Error> for DriStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DriStatus::Config,
            Error::Plan(_) => DriStatus::Plan,
            Error::Contract(_) => DriStatus::Contract,
            Error::State(_) => DriStatus::State,
            Error::Dimension(_) => DriStatus::Dimension,
            Error::Input(_) => DriStatus::Input,
            Error::Data(_) => DriStatus::Data,
            Error::Parse(_) => DriStatus::Parse,
            Error::Protocol(_) => DriStatus::Protocol,
            Error::Io { .. } => DriStatus::Io,
            Error::Numeric(_) => DriStatus::Numeric,
        }
    }
}

/// A restored checkpoint: configuration, model graph and weights.
pub struct DriModel {
    cfg: RunConfig,
    model: ReidModel,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: DriStatus, msg: impl Into<String>) -> DriStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping core errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), DriStatus>) -> DriStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DriStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DriStatus::Panic, "panic inside the dri library"),
    }
}

fn from_core(e: Error) -> DriStatus {
    fail(DriStatus::from(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DriStatus> {
    if p.is_null() {
        return Err(fail(DriStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DriStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn null(what: &str) -> DriStatus {
    fail(DriStatus::NullArgument, format!("{what} is NULL"))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dri_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dri_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `dri train` into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dri_model_load(path: *const c_char, out: *mut *mut DriModel) -> DriStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (cfg, model, store) = restore(Path::new(path)).map_err(from_core)?;
        *out = Box::into_raw(Box::new(DriModel { cfg, model, store }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`dri_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dri_model_free(model: *mut DriModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry `channels × height × width` and embedding width.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dri_model_shape(
    model: *const DriModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    embedding_dim: *mut usize,
) -> DriStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() || embedding_dim.is_null() {
            return Err(null("shape output"));
        }
        let b = &m.cfg.model.backbone;
        *channels = b.channels;
        *height = b.image_h;
        *width = b.image_w;
        *embedding_dim = b.dim;
        Ok(())
    })
}

/// Whether the model reads `(size, aspect)` metadata per image.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dri_model_uses_metadata(model: *const DriModel, out: *mut bool) -> DriStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.sst.is_some();
        Ok(())
    })
}

/// Number of trainable parameters the checkpoint was fine-tuned with.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dri_model_trainable_params(model: *const DriModel, out: *mut usize) -> DriStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = trainable_param_count(&m.cfg.model).total();
        Ok(())
    })
}

/// Embeds `count` images laid out as `[count, C, H, W]` floats into
/// `out[count * D]`. `size` and `aspect` hold one value per image and may
/// be NULL when the model reads no metadata.
///
/// # Safety
/// `pixels` must hold `count*C*H*W` floats, `out` must have room for
/// `out_len` floats, and `size`/`aspect` (when non-NULL) `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn dri_model_embed(
    model: *const DriModel,
    pixels: *const f32,
    count: usize,
    size: *const f64,
    aspect: *const f64,
    out: *mut f32,
    out_len: usize,
) -> DriStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() || out.is_null() {
            return Err(null("pixels or out"));
        }
        let b = &m.cfg.model.backbone;
        let per = b.channels * b.image_h * b.image_w;
        if count == 0 {
            return Err(fail(DriStatus::Input, "count must be positive"));
        }
        if out_len < count * b.dim {
            return Err(fail(
                DriStatus::Dimension,
                format!("out holds {out_len} floats, {} needed", count * b.dim),
            ));
        }
        if size.is_null() != aspect.is_null() {
            return Err(fail(DriStatus::Input, "size and aspect must both be set or both be NULL"));
        }
        let data = std::slice::from_raw_parts(pixels, count * per);
        let images = data
            .chunks_exact(per)
            .map(|c| Tensor::new(vec![b.channels, b.image_h, b.image_w], c.to_vec()))
            .collect::<dri::error::Result<Vec<_>>>()
            .map_err(from_core)?;
        let meta: Vec<Option<(f64, f64)>> = if size.is_null() {
            vec![None; count]
        } else {
            let s = std::slice::from_raw_parts(size, count);
            let a = std::slice::from_raw_parts(aspect, count);
            s.iter().zip(a).map(|(&s, &a)| Some((s, a))).collect()
        };
        let samples: Vec<Sample<'_, f32>> = images
            .iter()
            .zip(meta)
            .map(|(image, meta)| Sample { image, meta })
            .collect();
        let f = m.model.embed_all(&m.store, &samples, EMBED_CHUNK).map_err(from_core)?;
        std::slice::from_raw_parts_mut(out, f.numel()).copy_from_slice(f.data());
        Ok(())
    })
}

/// Closed-form trainable parameter count for a run configuration given as
/// `key = value` lines (empty for the defaults).
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dri_param_count(config: *const c_char, out: *mut usize) -> DriStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(config, "config")?;
        let cfg = RunConfig::parse_str(text).map_err(from_core)?;
        *out = trainable_param_count(&cfg.model).total();
        Ok(())
    })
}
