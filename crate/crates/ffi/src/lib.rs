//! C ABI over the segvg model.
//!
//! Models are opaque handles created by [`segvg_model_load`] and released
//! with [`segvg_model_free`]. Every fallible call returns a
//! [`SegvgStatus`]; on failure [`segvg_last_error`] describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use segvg::data::tokenize;
use segvg::geometry::{iou, BoxCcwh};
use segvg::model::{Model, ModelInput};
use segvg::tensor::{ParamStore, Tensor};
use segvg::train::{load_trained, RunConfig};
use segvg::Error;

/// Result codes. The first five match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegvgStatus {
    Ok = 0,
    Failure = 1,
    Config = 2,
    Numeric = 3,
    Checkpoint = 4,
    NullPointer = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// Loaded configuration and weights.
pub struct SegvgModel {
    model: Model,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> SegvgStatus {
    match e {
        Error::Config { .. } => SegvgStatus::Config,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => SegvgStatus::Numeric,
        Error::Checkpoint(_) | Error::CheckpointMismatch { .. } => SegvgStatus::Checkpoint,
        Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } | Error::Domain { .. } => {
            SegvgStatus::InvalidArgument
        }
        _ => SegvgStatus::Failure,
    }
}

enum Failure {
    Status(SegvgStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SegvgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SegvgStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SegvgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(SegvgStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(SegvgStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

/// Thread-local description of the last failure; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn segvg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segvg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the model described by the JSON run configuration at
/// `config_path` (NULL for defaults) and fills it from `checkpoint_path`.
///
/// # Safety
/// Paths must be NUL-terminated strings or NULL where allowed; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn segvg_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut SegvgModel,
) -> SegvgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(Path::new(str_arg(config_path, "config_path")?))?
        };
        let ckpt = str_arg(checkpoint_path, "checkpoint_path")?;
        let (model, store) = load_trained(&cfg.model, Path::new(ckpt))?;
        *out = Box::into_raw(Box::new(SegvgModel { model, store }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`segvg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn segvg_model_free(model: *mut SegvgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected image size: writes channels (3), height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn segvg_model_image_shape(
    model: *const SegvgModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SegvgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        let [h, w] = m.model.config().image_size;
        *channels = 3;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Grounds `text` in a planar RGB image (`3 * height * width` floats in
/// `[0, 1]`). Writes the center/size box to `out_box[0..4]` and the
/// confidence to `out_confidence`.
///
/// # Safety
/// `image` must point to `image_len` floats; `out_box` to 4 writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn segvg_predict(
    model: *const SegvgModel,
    image: *const f32,
    image_len: usize,
    text: *const c_char,
    out_box: *mut f64,
    out_confidence: *mut f64,
) -> SegvgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if out_box.is_null() || out_confidence.is_null() {
            return Err(null("output"));
        }
        let cfg = m.model.config();
        let [h, w] = cfg.image_size;
        if image_len != 3 * h * w {
            return Err(invalid(format!("image has {image_len} values, model expects {}", 3 * h * w)));
        }
        let pixels = std::slice::from_raw_parts(image, image_len).to_vec();
        let image = Tensor::new(&[3, h, w], pixels)?;
        let (tokens, padding) = tokenize(str_arg(text, "text")?, cfg.text_len)?;
        let pred = m.model.predict(
            &m.store,
            &ModelInput {
                image: &image,
                tokens: &tokens,
                padding: &padding,
            },
        )?;
        std::slice::from_raw_parts_mut(out_box, 4).copy_from_slice(&pred.boxes.to_array());
        *out_confidence = pred.confidence;
        Ok(())
    })
}

/// Token ids and padding mask (1 = padding) for `text`, `len` entries each.
///
/// # Safety
/// `ids` and `mask` must each hold `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn segvg_tokenize(
    text: *const c_char,
    len: usize,
    ids: *mut u32,
    mask: *mut u8,
) -> SegvgStatus {
    guard(|| {
        if ids.is_null() || mask.is_null() {
            return Err(null("output"));
        }
        let (t, m) = tokenize(str_arg(text, "text")?, len)?;
        let ids = std::slice::from_raw_parts_mut(ids, len);
        let mask = std::slice::from_raw_parts_mut(mask, len);
        for i in 0..len {
            ids[i] = t[i] as u32;
            mask[i] = u8::from(m[i]);
        }
        Ok(())
    })
}

/// IoU of two center/size boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles each.
#[no_mangle]
pub unsafe extern "C" fn segvg_iou(a: *const f64, b: *const f64, out: *mut f64) -> SegvgStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("box"));
        }
        let a = BoxCcwh::from_slice(std::slice::from_raw_parts(a, 4));
        let b = BoxCcwh::from_slice(std::slice::from_raw_parts(b, 4));
        if !a.is_valid() || !b.is_valid() {
            return Err(invalid("boxes need finite coordinates and positive extents"));
        }
        *out = iou(&a.to_xyxy(), &b.to_xyxy());
        Ok(())
    })
}
