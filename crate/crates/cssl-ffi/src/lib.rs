//! C ABI for the continual-pretraining pipeline.
//!
//! Conventions:
//! - Every fallible function returns a [`CsslStatus`]; `CSSL_STATUS_OK` is 0.
//! - On failure the thread-local error message is retrievable with
//!   [`cssl_last_error_message`].
//! - `CsslConfig` and `CsslModel` are opaque; create them through the
//!   constructors here and release them with the matching `_free` function.
//! - Strings are NUL-terminated UTF-8; paths are passed as strings.
//!
//! The C header is generated into `include/cssl.h` by cbindgen at build
//! time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cssl_core::checkpoint;
use cssl_core::config::RunConfig;
use cssl_core::data::ImageBatch;
use cssl_core::error::Error;
use cssl_core::model::mae::embed_image;
use cssl_core::model::{ModelParams, Pooling};
use cssl_core::pipeline::{
    generate_data, run_build_buffer, run_continual, run_evaluate, run_finetune, run_pretrain,
    FinetuneSource,
};
use cssl_core::rehearsal::derive_buffer_params;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    MissingArtifact = 4,
    ParseError = 5,
    CheckpointMismatch = 6,
    Diverged = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

fn status_for(err: &Error) -> CsslStatus {
    match err {
        Error::InvalidArgument(_) => CsslStatus::InvalidArgument,
        Error::ShapeMismatch(_) => CsslStatus::InvalidArgument,
        Error::Diverged { .. } => CsslStatus::Diverged,
        Error::MissingArtifact { .. } => CsslStatus::MissingArtifact,
        Error::CheckpointMismatch(_) => CsslStatus::CheckpointMismatch,
        Error::Parse { .. } => CsslStatus::ParseError,
        Error::Io { .. } => CsslStatus::Io,
    }
}

fn report(err: Error) -> CsslStatus {
    let status = status_for(&err);
    set_last_error(&err.to_string());
    status
}

/// Run every body through a panic guard so unwinding never crosses the FFI
/// boundary.
fn guarded(body: impl FnOnce() -> CsslStatus) -> CsslStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&msg);
            CsslStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr_arg(ptr: *const c_char) -> Result<&'static str, CsslStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(CsslStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        CsslStatus::InvalidUtf8
    })
}

/// Opaque run configuration handle.
pub struct CsslConfig {
    inner: RunConfig,
}

/// Opaque trained-model handle.
pub struct CsslModel {
    params: ModelParams,
}

/// Evaluation metrics. `has_auc` is 0 when the test set had one class.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CsslMetrics {
    pub acc: f64,
    pub auc: f64,
    pub has_auc: i32,
    pub f1: f64,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cssl_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copy the last error message on this thread into `buffer`. Returns the
/// full message length in bytes (excluding the NUL), regardless of how much
/// was copied. Passing a null or zero-length buffer just queries the length.
///
/// # Safety
/// `buffer` must point to at least `buffer_len` writable bytes when
/// non-null.
#[no_mangle]
pub unsafe extern "C" fn cssl_last_error_message(buffer: *mut c_char, buffer_len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buffer.is_null() && buffer_len > 0 {
            let copy_len = bytes.len().min(buffer_len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer as *mut u8, copy_len);
            *buffer.add(copy_len) = 0;
        }
        bytes.len()
    })
}

/// Create a configuration from a preset name (`tiny` or `paper`).
///
/// # Safety
/// `name` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn cssl_config_preset(
    name: *const c_char,
    out: *mut *mut CsslConfig,
) -> CsslStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return CsslStatus::NullPointer;
        }
        let name = match cstr_arg(name) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match RunConfig::preset(name) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(CsslConfig { inner: cfg }));
                CsslStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Load a configuration from a key-value file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cssl_config_load(
    path: *const c_char,
    out: *mut *mut CsslConfig,
) -> CsslStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return CsslStatus::NullPointer;
        }
        let path = match cstr_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match RunConfig::load(Path::new(path)) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(CsslConfig { inner: cfg }));
                CsslStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Apply one `key = value` override to a configuration.
///
/// # Safety
/// All pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_config_set(
    config: *mut CsslConfig,
    key: *const c_char,
    value: *const c_char,
) -> CsslStatus {
    guarded(|| {
        let Some(config) = config.as_mut() else {
            set_last_error("null config handle");
            return CsslStatus::NullPointer;
        };
        let (key, value) = match (cstr_arg(key), cstr_arg(value)) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match config.inner.set(key, value) {
            Ok(()) => CsslStatus::Ok,
            Err(err) => report(err),
        }
    })
}

/// Write a configuration to a key-value file.
///
/// # Safety
/// Pointers must be valid; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_config_save(
    config: *const CsslConfig,
    path: *const c_char,
) -> CsslStatus {
    guarded(|| {
        let Some(config) = config.as_ref() else {
            set_last_error("null config handle");
            return CsslStatus::NullPointer;
        };
        let path = match cstr_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match config.inner.save(Path::new(path)) {
            Ok(()) => CsslStatus::Ok,
            Err(err) => report(err),
        }
    })
}

/// Release a configuration handle. Passing null is a no-op.
///
/// # Safety
/// `config` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn cssl_config_free(config: *mut CsslConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

unsafe fn with_config_and_dirs(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
    body: impl FnOnce(&RunConfig, &Path, &Path) -> Result<(), Error>,
) -> CsslStatus {
    let Some(config) = config.as_ref() else {
        set_last_error("null config handle");
        return CsslStatus::NullPointer;
    };
    let (data_dir, run_dir) = match (cstr_arg(data_dir), cstr_arg(run_dir)) {
        (Ok(d), Ok(r)) => (d, r),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match body(&config.inner, Path::new(data_dir), Path::new(run_dir)) {
        Ok(()) => CsslStatus::Ok,
        Err(err) => report(err),
    }
}

/// Generate the synthetic datasets under `out_dir`.
///
/// # Safety
/// Pointers must be valid; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_generate_data(
    config: *const CsslConfig,
    out_dir: *const c_char,
    force: i32,
) -> CsslStatus {
    guarded(|| {
        let Some(config) = config.as_ref() else {
            set_last_error("null config handle");
            return CsslStatus::NullPointer;
        };
        let out_dir = match cstr_arg(out_dir) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match generate_data(&config.inner, Path::new(out_dir), force != 0) {
            Ok(()) => CsslStatus::Ok,
            Err(err) => report(err),
        }
    })
}

/// Stage-1 pretraining; writes `m1.ckpt` and the loss curve into `run_dir`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_pretrain(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
) -> CsslStatus {
    guarded(|| {
        with_config_and_dirs(config, data_dir, run_dir, |cfg, data, run| {
            run_pretrain(cfg, data, run).map(|_| ())
        })
    })
}

/// Buffer construction; writes `buffer.jsonl`. `out_k` / `out_t` receive the
/// derived cluster count and buffer size when non-null.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_build_buffer(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
    out_k: *mut usize,
    out_t: *mut usize,
) -> CsslStatus {
    guarded(|| {
        with_config_and_dirs(config, data_dir, run_dir, |cfg, data, run| {
            let buffer = run_build_buffer(cfg, data, run)?;
            if !out_k.is_null() {
                *out_k = buffer.meta.k;
            }
            if !out_t.is_null() {
                *out_t = buffer.meta.t;
            }
            Ok(())
        })
    })
}

/// Derived buffer parameters without running anything:
/// `K = floor(n1 * alpha)`, `T = floor(n1 * beta)`.
///
/// # Safety
/// `out_k` and `out_t` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cssl_derive_buffer_params(
    n1: usize,
    alpha: f64,
    beta: f64,
    out_k: *mut usize,
    out_t: *mut usize,
) -> CsslStatus {
    guarded(|| {
        if out_k.is_null() || out_t.is_null() {
            set_last_error("null output pointer");
            return CsslStatus::NullPointer;
        }
        match derive_buffer_params(n1, alpha, beta) {
            Ok((k, t)) => {
                *out_k = k;
                *out_t = t;
                CsslStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Stage-3 continual pretraining; writes `m2.ckpt`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_continual(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
) -> CsslStatus {
    guarded(|| {
        with_config_and_dirs(config, data_dir, run_dir, |cfg, data, run| {
            run_continual(cfg, data, run).map(|_| ())
        })
    })
}

/// Fine-tune from `source` ("m2", "m1", or "none"); writes
/// `classifier.ckpt`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_finetune(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
    source: *const c_char,
) -> CsslStatus {
    guarded(|| {
        let source = match cstr_arg(source) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let source: FinetuneSource = match source.parse() {
            Ok(s) => s,
            Err(err) => return report(err),
        };
        with_config_and_dirs(config, data_dir, run_dir, |cfg, data, run| {
            run_finetune(cfg, data, run, source).map(|_| ())
        })
    })
}

/// Evaluate the fine-tuned classifier; fills `out_metrics` and writes
/// `metrics.json`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_evaluate(
    config: *const CsslConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
    out_metrics: *mut CsslMetrics,
) -> CsslStatus {
    guarded(|| {
        if out_metrics.is_null() {
            set_last_error("null metrics pointer");
            return CsslStatus::NullPointer;
        }
        with_config_and_dirs(config, data_dir, run_dir, |cfg, data, run| {
            let report = run_evaluate(cfg, data, run)?;
            *out_metrics = CsslMetrics {
                acc: report.acc,
                auc: report.auc.unwrap_or(f64::NAN),
                has_auc: i32::from(report.auc.is_some()),
                f1: report.f1,
            };
            Ok(())
        })
    })
}

/// Load a checkpoint into an opaque model handle.
///
/// # Safety
/// Pointers must be valid; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cssl_model_load(
    path: *const c_char,
    out: *mut *mut CsslModel,
) -> CsslStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return CsslStatus::NullPointer;
        }
        let path = match cstr_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(CsslModel {
                    params: ckpt.params,
                }));
                CsslStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Embedding width of a loaded model.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cssl_model_embed_dim(
    model: *const CsslModel,
    out: *mut usize,
) -> CsslStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_last_error("null model handle");
            return CsslStatus::NullPointer;
        };
        if out.is_null() {
            set_last_error("null output pointer");
            return CsslStatus::NullPointer;
        }
        *out = model.params.config().d_enc;
        CsslStatus::Ok
    })
}

/// Mean-pooled embeddings for `count` images of shape
/// `channels x height x width` (values in [0, 1], row-major). `out` must
/// hold `count * embed_dim` doubles.
///
/// # Safety
/// `pixels` must hold `count * channels * height * width` doubles; `out`
/// must hold `count * embed_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cssl_model_embed(
    model: *const CsslModel,
    pixels: *const f64,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CsslStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_last_error("null model handle");
            return CsslStatus::NullPointer;
        };
        if pixels.is_null() || out.is_null() {
            set_last_error("null buffer pointer");
            return CsslStatus::NullPointer;
        }
        let pixel_count = count * channels * height * width;
        let data = std::slice::from_raw_parts(pixels, pixel_count);
        let batch = ImageBatch {
            data: data.to_vec(),
            s: count,
            c: channels,
            h: height,
            w: width,
            domain_id: 0,
            sample_ids: (0..count as u64).collect(),
        };
        match embed_image(&batch, &model.params, Pooling::Mean) {
            Ok(embeddings) => {
                std::ptr::copy_nonoverlapping(embeddings.as_ptr(), out, embeddings.len());
                CsslStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Release a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn cssl_model_free(model: *mut CsslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
