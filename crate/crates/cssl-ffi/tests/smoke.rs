//! Exercise the C ABI from Rust: status codes, error messages, handle
//! lifecycle, and a tiny end-to-end arithmetic call.

use std::ffi::{c_char, CString};
use std::ptr;

use cssl_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let len = unsafe { cssl_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    buf.truncate(len.min(buf.len() - 1));
    String::from_utf8_lossy(&buf).into_owned()
}

#[test]
fn version_is_nonempty() {
    let v = cssl_version();
    assert!(!v.is_null());
    let s = unsafe { std::ffi::CStr::from_ptr(v) }.to_str().unwrap();
    assert!(!s.is_empty());
}

#[test]
fn preset_roundtrip_and_overrides() {
    let mut cfg: *mut CsslConfig = ptr::null_mut();
    let status = unsafe { cssl_config_preset(cstr("tiny").as_ptr(), &mut cfg) };
    assert_eq!(status, CsslStatus::Ok);
    assert!(!cfg.is_null());

    let status =
        unsafe { cssl_config_set(cfg, cstr("stage1.epochs").as_ptr(), cstr("7").as_ptr()) };
    assert_eq!(status, CsslStatus::Ok);

    let status =
        unsafe { cssl_config_set(cfg, cstr("bogus.key").as_ptr(), cstr("1").as_ptr()) };
    assert_eq!(status, CsslStatus::InvalidArgument);
    assert!(last_error().contains("bogus.key"));

    let dir = tempdir();
    let path = dir.join("cfg.kv");
    let status = unsafe { cssl_config_save(cfg, cstr(path.to_str().unwrap()).as_ptr()) };
    assert_eq!(status, CsslStatus::Ok);

    let mut reloaded: *mut CsslConfig = ptr::null_mut();
    let status =
        unsafe { cssl_config_load(cstr(path.to_str().unwrap()).as_ptr(), &mut reloaded) };
    assert_eq!(status, CsslStatus::Ok);
    unsafe {
        cssl_config_free(cfg);
        cssl_config_free(reloaded);
        cssl_config_free(ptr::null_mut()); // null free is a no-op
    }
}

#[test]
fn unknown_preset_reports_error() {
    let mut cfg: *mut CsslConfig = ptr::null_mut();
    let status = unsafe { cssl_config_preset(cstr("huge").as_ptr(), &mut cfg) };
    assert_eq!(status, CsslStatus::InvalidArgument);
    assert!(last_error().contains("huge"));
    assert!(cfg.is_null());
}

#[test]
fn null_arguments_are_rejected() {
    let mut cfg: *mut CsslConfig = ptr::null_mut();
    assert_eq!(
        unsafe { cssl_config_preset(ptr::null(), &mut cfg) },
        CsslStatus::NullPointer
    );
    assert_eq!(
        unsafe { cssl_config_preset(cstr("tiny").as_ptr(), ptr::null_mut()) },
        CsslStatus::NullPointer
    );
}

#[test]
fn derive_buffer_params_matches_reference_arithmetic() {
    let mut k = 0usize;
    let mut t = 0usize;
    let status = unsafe { cssl_derive_buffer_params(31256, 0.01, 0.05, &mut k, &mut t) };
    assert_eq!(status, CsslStatus::Ok);
    assert_eq!((k, t), (312, 1562));

    let status = unsafe { cssl_derive_buffer_params(10, 0.01, 0.05, &mut k, &mut t) };
    assert_eq!(status, CsslStatus::InvalidArgument);
}

#[test]
fn model_load_missing_file_is_io_error() {
    let mut model: *mut CsslModel = ptr::null_mut();
    let status =
        unsafe { cssl_model_load(cstr("/nonexistent/m1.ckpt").as_ptr(), &mut model) };
    assert_eq!(status, CsslStatus::Io);
    assert!(model.is_null());
}

#[test]
fn embed_through_the_c_surface() {
    // Build a checkpoint with the Rust API, then use only the C surface.
    let dir = tempdir();
    let ckpt_path = dir.join("m.ckpt");
    let params =
        cssl_core::model::ModelParams::init(cssl_core::model::ModelConfig::tiny(), 3).unwrap();
    cssl_core::checkpoint::save(
        &ckpt_path,
        &cssl_core::checkpoint::Checkpoint::new(cssl_core::checkpoint::Stage::Stage1, params),
    )
    .unwrap();

    let mut model: *mut CsslModel = ptr::null_mut();
    let status =
        unsafe { cssl_model_load(cstr(ckpt_path.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(status, CsslStatus::Ok);

    let mut dim = 0usize;
    assert_eq!(
        unsafe { cssl_model_embed_dim(model, &mut dim) },
        CsslStatus::Ok
    );
    assert_eq!(dim, 64);

    let pixels = vec![0.5f64; 2 * 1 * 32 * 32];
    let mut out = vec![0.0f64; 2 * dim];
    let status = unsafe {
        cssl_model_embed(model, pixels.as_ptr(), 2, 1, 32, 32, out.as_mut_ptr())
    };
    assert_eq!(status, CsslStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    // Identical images embed identically.
    assert_eq!(out[..dim], out[dim..]);

    unsafe { cssl_model_free(model) };
}

#[test]
fn generated_header_exists_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("cssl.h");
    let text = std::fs::read_to_string(&header).expect("include/cssl.h missing");
    for symbol in [
        "cssl_version",
        "cssl_last_error_message",
        "cssl_config_preset",
        "cssl_generate_data",
        "cssl_pretrain",
        "cssl_build_buffer",
        "cssl_continual",
        "cssl_finetune",
        "cssl_evaluate",
        "cssl_model_embed",
        "CsslMetrics",
        "CsslStatus",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "cssl-ffi-test-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
