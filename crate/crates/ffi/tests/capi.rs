use std::ffi::{CStr, CString};
use std::ptr;

use dri::cli::{run, Cli};
use dri_ffi::*;

use clap::Parser;

fn last_error() -> String {
    let p = dri_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const TINY: [&str; 16] = [
    "--set", "train.epochs=1",
    "--set", "train.pretrain_epochs=0",
    "--set", "dataset.num_ids=6",
    "--set", "dataset.test_ids=2",
    "--set", "dataset.distractor_ids=0",
    "--set", "model.peft=dri",
    "--set", "train.p=2",
    "--set", "train.k=2",
];

fn tiny_checkpoint(dir: &std::path::Path) -> CString {
    let mut args = vec!["dri", "train", "--out", dir.to_str().unwrap()];
    args.extend(TINY);
    run(Cli::parse_from(args)).expect("tiny training run");
    CString::new(dir.join("checkpoint.dri").to_str().unwrap()).unwrap()
}

#[test]
fn load_embed_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dri_model_load(path.as_ptr(), &mut model) }, DriStatus::Ok);
    assert!(!model.is_null());
    assert!(dri_last_error().is_null());

    let (mut c, mut h, mut w, mut d) = (0, 0, 0, 0);
    assert_eq!(unsafe { dri_model_shape(model, &mut c, &mut h, &mut w, &mut d) }, DriStatus::Ok);
    let mut meta = true;
    assert_eq!(unsafe { dri_model_uses_metadata(model, &mut meta) }, DriStatus::Ok);
    let mut trainable = 0;
    assert_eq!(unsafe { dri_model_trainable_params(model, &mut trainable) }, DriStatus::Ok);
    assert!(trainable > 0);

    let n = 3;
    let pixels: Vec<f32> = (0..n * c * h * w).map(|i| (i % 17) as f32 / 17.0).collect();
    let (size, aspect) = (vec![40.0; n], vec![0.2; n]);
    let (sp, ap) = if meta { (size.as_ptr(), aspect.as_ptr()) } else { (ptr::null(), ptr::null()) };
    let mut out = vec![0f32; n * d];
    let status = unsafe { dri_model_embed(model, pixels.as_ptr(), n, sp, ap, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, DriStatus::Ok, "{}", last_error());
    assert!(out.iter().all(|v| v.is_finite()));
    let mut again = vec![0f32; n * d];
    unsafe { dri_model_embed(model, pixels.as_ptr(), n, sp, ap, again.as_mut_ptr(), again.len()) };
    assert_eq!(out, again);

    let status = unsafe { dri_model_embed(model, pixels.as_ptr(), n, sp, ap, out.as_mut_ptr(), d) };
    assert_eq!(status, DriStatus::Dimension);
    assert!(last_error().contains("needed"));
    unsafe { dri_model_free(model) };
}

#[test]
fn load_failures_set_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint.dri").unwrap();
    assert_eq!(unsafe { dri_model_load(missing.as_ptr(), &mut model) }, DriStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { dri_model_load(ptr::null(), &mut model) }, DriStatus::NullArgument);
    assert_eq!(unsafe { dri_model_load(missing.as_ptr(), ptr::null_mut()) }, DriStatus::NullArgument);
    unsafe { dri_model_free(ptr::null_mut()) };
}

#[test]
fn param_count_matches_core() {
    let text = CString::new("model.peft = lora\n").unwrap();
    let mut n = 0;
    assert_eq!(unsafe { dri_param_count(text.as_ptr(), &mut n) }, DriStatus::Ok);
    let cfg = dri::config::RunConfig::parse_str("model.peft = lora\n").unwrap();
    assert_eq!(n, dri::model::trainable_param_count(&cfg.model).total());

    let bad = CString::new("model.peft = nonsense\n").unwrap();
    assert_eq!(unsafe { dri_param_count(bad.as_ptr(), &mut n) }, DriStatus::Config);
    let bytes = [0xffu8, 0];
    assert_eq!(unsafe { dri_param_count(bytes.as_ptr().cast(), &mut n) }, DriStatus::InvalidUtf8);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(dri_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dri.h")).unwrap();
    for name in [
        "dri_last_error",
        "dri_version",
        "dri_model_load",
        "dri_model_free",
        "dri_model_shape",
        "dri_model_uses_metadata",
        "dri_model_trainable_params",
        "dri_model_embed",
        "dri_param_count",
        "typedef struct DriModel DriModel",
        "DRI_STATUS_NULL_ARGUMENT",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
