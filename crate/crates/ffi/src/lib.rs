//! C ABI over `sas-core`: load a fine-tuned model checkpoint, run inference,
//! and compute adapter parameter counts and trade-off scores.
//!
//! Every fallible call returns a [`SasStatus`]. On failure the message is
//! kept per thread and can be read with [`sas_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. Images are
//! passed as contiguous `f32` arrays of `count × channels × side × side`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sas_core::backbone::Backbone;
use sas_core::error::Error;
use sas_core::metrics::{ppt_score, top1_percent};
use sas_core::params::ParamSet;
use sas_core::sas::{param_count, SasConfig};
use sas_core::tensor::Tensor;
use sas_core::train::predict_classes;
use sas_core::variants::{load_model, VariantModel};

/// Status codes. Values 1 to 4 match the exit codes of the `sas` CLI.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SasStatus {
    Ok = 0,
    /// I/O or results-format failure.
    Other = 1,
    Config = 2,
    /// Bad input data or an unreadable checkpoint.
    Data = 3,
    /// Shape mismatch, contract violation or non-finite values.
    Numeric = 4,
    /// Null pointer or invalid UTF-8 argument.
    InvalidArgument = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// A frozen backbone.
pub struct SasBackbone {
    inner: Backbone<f32>,
}

/// A frozen backbone together with a fine-tuned variant.
pub struct SasModel {
    backbone: Backbone<f32>,
    model: VariantModel<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SasModelInfo {
    pub channels: usize,
    pub image_side: usize,
    pub num_classes: usize,
    /// Trainable adapter scalars, excluding the classification head.
    pub adapter_params: u64,
    pub head_params: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SasStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => SasStatus::Config,
            3 => SasStatus::Data,
            4 => SasStatus::Numeric,
            _ => SasStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(SasStatus::InvalidArgument, msg.to_owned())
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SasStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SasStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SasStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn out_arg<'a, T>(out: *mut T) -> Result<&'a mut T, Failure> {
    out.as_mut().ok_or_else(|| invalid("output pointer is null"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

impl SasModel {
    fn images(&self, data: &[f32], count: usize) -> Result<Vec<Tensor<f32>>, Failure> {
        let cfg = &self.backbone.config;
        let shape = [cfg.channels, cfg.image_side, cfg.image_side];
        let len = cfg.image_len();
        debug_assert_eq!(data.len(), count * len);
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Failure(SasStatus::Data, format!("image value {i} is not finite")));
        }
        data.chunks(len)
            .map(|c| Tensor::new(&shape, c.to_vec()).map_err(Failure::from))
            .collect()
    }

    fn predict(&self, images: *const f32, count: usize) -> Result<Vec<usize>, Failure> {
        let data = unsafe { slice_arg(images, count * self.backbone.config.image_len(), "images")? };
        let images = self.images(data, count)?;
        Ok(predict_classes(&self.model, &self.backbone, &images)?)
    }
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated) and returns the full message length in bytes, excluding
/// the terminator. Returns 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sas_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Adapter parameter count `2(d'd + Mrd + Lr'r)` for the given shape.
///
/// # Safety
/// `out` must point to a writable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn sas_param_count(
    d: usize,
    layers: usize,
    d_prime: usize,
    r: usize,
    r_prime: usize,
    m: usize,
    out: *mut u64,
) -> SasStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = SasConfig {
            d,
            layers,
            d_prime,
            r,
            r_prime,
            m,
        };
        cfg.validate()?;
        *out = param_count(&cfg) as u64;
        Ok(())
    })
}

/// Trade-off score of a top-1 accuracy (percent) and a parameter count.
#[no_mangle]
pub extern "C" fn sas_ppt_score(top1: f64, params: u64) -> f64 {
    ppt_score(top1, params)
}

/// Loads a backbone checkpoint written by `sas pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn sas_backbone_load(path: *const c_char, out: *mut *mut SasBackbone) -> SasStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let inner = Backbone::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SasBackbone { inner }));
        Ok(())
    })
}

/// Releases a backbone. Null is ignored.
///
/// # Safety
/// `backbone` must come from [`sas_backbone_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sas_backbone_free(backbone: *mut SasBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Writes the backbone's hex SHA-256 checksum (64 characters plus NUL)
/// into `buf`, which must hold at least 65 bytes.
///
/// # Safety
/// `backbone` must be a live handle and `buf` point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sas_backbone_checksum(
    backbone: *const SasBackbone,
    buf: *mut c_char,
    len: usize,
) -> SasStatus {
    guard(|| {
        let bb = backbone.as_ref().ok_or_else(|| invalid("backbone is null"))?;
        let sum = bb.inner.checksum();
        let dst = slice_mut_arg(buf.cast::<u8>(), len, "buf")?;
        if dst.len() <= sum.len() {
            return Err(invalid(&format!("buf needs {} bytes", sum.len() + 1)));
        }
        dst[..sum.len()].copy_from_slice(sum.as_bytes());
        dst[sum.len()] = 0;
        Ok(())
    })
}

/// Loads a fine-tuned model checkpoint written by `sas finetune --model-out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn sas_model_load(path: *const c_char, out: *mut *mut SasModel) -> SasStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let (backbone, model) = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SasModel { backbone, model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sas_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sas_model_free(model: *mut SasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry and parameter counts of a model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sas_model_info(model: *const SasModel, out: *mut SasModelInfo) -> SasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let out = out_arg(out)?;
        let (adapter, head) = m.model.trainable_params();
        *out = SasModelInfo {
            channels: m.backbone.config.channels,
            image_side: m.backbone.config.image_side,
            num_classes: m.model.num_classes(),
            adapter_params: adapter as u64,
            head_params: head as u64,
        };
        Ok(())
    })
}

/// Predicted class for each of `count` images; ties go to the lowest class.
///
/// # Safety
/// `images` must hold `count × channels × side × side` floats and
/// `out_labels` room for `count` values.
#[no_mangle]
pub unsafe extern "C" fn sas_model_predict(
    model: *const SasModel,
    images: *const f32,
    count: usize,
    out_labels: *mut usize,
) -> SasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let out = slice_mut_arg(out_labels, count, "out_labels")?;
        if count == 0 {
            return Ok(());
        }
        let preds = m.predict(images, count)?;
        out.copy_from_slice(&preds);
        Ok(())
    })
}

/// Top-1 accuracy in percent of the model on `count` labelled images.
///
/// # Safety
/// `images` must hold `count` images, `labels` `count` values, and
/// `out_top1` be writable.
#[no_mangle]
pub unsafe extern "C" fn sas_model_evaluate(
    model: *const SasModel,
    images: *const f32,
    labels: *const usize,
    count: usize,
    out_top1: *mut f64,
) -> SasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let out = out_arg(out_top1)?;
        if count == 0 {
            return Err(Failure(SasStatus::Data, "no images to evaluate".into()));
        }
        let labels = slice_arg(labels, count, "labels")?;
        if let Some(&l) = labels.iter().find(|&&l| l >= m.model.num_classes()) {
            return Err(Failure(
                SasStatus::Data,
                format!("label {l} out of range for {} classes", m.model.num_classes()),
            ));
        }
        let preds = m.predict(images, count)?;
        *out = top1_percent(&preds, labels);
        Ok(())
    })
}
