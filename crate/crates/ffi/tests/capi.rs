use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use sas_core::backbone::{Backbone, BackboneConfig};
use sas_core::params::ParamSet;
use sas_core::rng::Rng;
use sas_core::sas::SasConfig;
use sas_core::tensor::Tensor;
use sas_core::train::predict_classes;
use sas_core::variants::{build_variant, save_model, VariantKind, VariantModel};
use sas_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { sas_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    assert_eq!(n, s.len());
    s
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn fixture(dir: &Path) -> (Backbone<f32>, VariantModel<f32>, std::path::PathBuf) {
    let cfg = BackboneConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        d: 8,
        layers: 4,
        heads: 2,
        mlp_ratio: 2,
        num_classes_pretrain: 3,
    };
    let mut bb = Backbone::init(cfg, &mut Rng::new(1)).unwrap();
    bb.freeze_all();
    let sas = SasConfig {
        d: 8,
        layers: 4,
        d_prime: 3,
        r: 2,
        r_prime: 2,
        m: 2,
    };
    let mut model = build_variant(VariantKind::FullSas(sas), &bb, 4, &mut Rng::new(2)).unwrap();
    let mut rng = Rng::new(3);
    for t in model.tensors_mut() {
        *t = rng.normal_tensor(t.shape(), 0.0, 0.5);
    }
    let path = dir.join("model.ckpt");
    save_model(&path, &bb, &model).unwrap();
    bb.save(dir.join("backbone.ckpt")).unwrap();
    (bb, model, path)
}

fn images(n: usize) -> Vec<f32> {
    let mut rng = Rng::new(9);
    (0..n * 64).map(|_| rng.standard_normal() as f32).collect()
}

#[test]
fn param_count_matches_reference_values() {
    for (m, want) in [(1, 19_200), (3, 31_488), (4, 37_632), (6, 49_920)] {
        let mut out = 0u64;
        let status = unsafe { sas_param_count(768, 12, 8, 4, 8, m, &mut out) };
        assert_eq!(status, SasStatus::Ok);
        assert_eq!(out, want);
    }
}

#[test]
fn param_count_rejects_bad_shape() {
    let mut out = 7u64;
    let status = unsafe { sas_param_count(768, 12, 8, 4, 8, 13, &mut out) };
    assert_eq!(status, SasStatus::Config);
    assert!(last_error().contains("M=13"), "{}", last_error());
    assert_eq!(out, 7);

    let status = unsafe { sas_param_count(768, 12, 8, 4, 8, 1, ptr::null_mut()) };
    assert_eq!(status, SasStatus::InvalidArgument);
}

#[test]
fn success_clears_last_error() {
    unsafe { sas_param_count(0, 12, 8, 4, 8, 1, &mut 0) };
    assert!(!last_error().is_empty());
    unsafe { sas_param_count(768, 12, 8, 4, 8, 1, &mut 0) };
    assert_eq!(unsafe { sas_last_error_message(ptr::null_mut(), 0) }, 0);
}

#[test]
fn error_message_truncates() {
    unsafe { sas_param_count(0, 12, 8, 4, 8, 1, &mut 0) };
    let full = last_error();
    let mut buf = [1 as c_char; 6];
    let n = unsafe { sas_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full.len());
    let short = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(short, &full[..5]);
}

#[test]
fn ppt_score_matches_core() {
    let got = sas_ppt_score(78.5, 49_920);
    assert_eq!(got, sas_core::metrics::ppt_score(78.5, 49_920));
    assert!((sas_ppt_score(100.0, 0) - 1.0).abs() < 1e-15);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(sas_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_predictions_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let (bb, model, path) = fixture(dir.path());
    let path = c_path(&path);
    let mut handle: *mut SasModel = ptr::null_mut();
    assert_eq!(unsafe { sas_model_load(path.as_ptr(), &mut handle) }, SasStatus::Ok);
    assert!(!handle.is_null());

    let mut info = SasModelInfo::default();
    assert_eq!(unsafe { sas_model_info(handle, &mut info) }, SasStatus::Ok);
    let (adapter, head) = model.trainable_params();
    assert_eq!(
        info,
        SasModelInfo {
            channels: 1,
            image_side: 8,
            num_classes: 4,
            adapter_params: adapter as u64,
            head_params: head as u64,
        }
    );

    let n = 12;
    let data = images(n);
    let mut labels = vec![usize::MAX; n];
    let status = unsafe { sas_model_predict(handle, data.as_ptr(), n, labels.as_mut_ptr()) };
    assert_eq!(status, SasStatus::Ok);
    let tensors: Vec<Tensor<f32>> = data
        .chunks(64)
        .map(|c| Tensor::new(&[1, 8, 8], c.to_vec()).unwrap())
        .collect();
    let want = predict_classes(&model, &bb, &tensors).unwrap();
    assert_eq!(labels, want);
    assert!(want.iter().any(|&c| c != want[0]), "fixture predicts one class only");

    let truth: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { want[i] } else { (want[i] + 1) % 4 }).collect();
    let mut top1 = 0.0;
    let status = unsafe { sas_model_evaluate(handle, data.as_ptr(), truth.as_ptr(), n, &mut top1) };
    assert_eq!(status, SasStatus::Ok);
    assert_eq!(top1, 50.0);

    unsafe { sas_model_free(handle) };
}

#[test]
fn evaluate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, path) = fixture(dir.path());
    let path = c_path(&path);
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sas_model_load(path.as_ptr(), &mut handle) }, SasStatus::Ok);

    let mut data = images(2);
    let mut top1 = -1.0;
    let status = unsafe { sas_model_evaluate(handle, data.as_ptr(), [0, 4].as_ptr(), 2, &mut top1) };
    assert_eq!(status, SasStatus::Data);
    assert!(last_error().contains("label 4"));

    data[5] = f32::NAN;
    let status = unsafe { sas_model_evaluate(handle, data.as_ptr(), [0, 1].as_ptr(), 2, &mut top1) };
    assert_eq!(status, SasStatus::Data);

    let status = unsafe { sas_model_evaluate(handle, ptr::null(), [0, 1].as_ptr(), 2, &mut top1) };
    assert_eq!(status, SasStatus::InvalidArgument);
    assert_eq!(top1, -1.0);

    let status = unsafe { sas_model_predict(ptr::null(), data.as_ptr(), 2, [0usize; 2].as_mut_ptr()) };
    assert_eq!(status, SasStatus::InvalidArgument);

    unsafe { sas_model_free(handle) };
}

#[test]
fn load_failures_leave_null_handles() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c_path(&dir.path().join("nope.ckpt"));
    let mut handle: *mut SasModel = ptr::dangling_mut::<SasModel>();
    let status = unsafe { sas_model_load(missing.as_ptr(), &mut handle) };
    assert_ne!(status, SasStatus::Ok);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    let mut handle: *mut SasModel = ptr::null_mut();
    assert_eq!(unsafe { sas_model_load(ptr::null(), &mut handle) }, SasStatus::InvalidArgument);

    // a backbone checkpoint is not a model checkpoint
    let (_, _, _) = fixture(dir.path());
    let bb_path = c_path(&dir.path().join("backbone.ckpt"));
    assert_eq!(unsafe { sas_model_load(bb_path.as_ptr(), &mut handle) }, SasStatus::Data);
    assert!(handle.is_null());
}

#[test]
fn backbone_checksum_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (bb, _, _) = fixture(dir.path());
    let path = c_path(&dir.path().join("backbone.ckpt"));
    let mut handle: *mut SasBackbone = ptr::null_mut();
    assert_eq!(unsafe { sas_backbone_load(path.as_ptr(), &mut handle) }, SasStatus::Ok);

    let mut buf = [0 as c_char; 65];
    assert_eq!(unsafe { sas_backbone_checksum(handle, buf.as_mut_ptr(), buf.len()) }, SasStatus::Ok);
    let sum = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(sum, bb.checksum());

    let mut small = [0 as c_char; 64];
    let status = unsafe { sas_backbone_checksum(handle, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, SasStatus::InvalidArgument);

    unsafe { sas_backbone_free(handle) };
    unsafe { sas_backbone_free(ptr::null_mut()) };
    unsafe { sas_model_free(ptr::null_mut()) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sas_ffi.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert_eq!(exports.len(), 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for code in ["SAS_STATUS_OK = 0", "SAS_STATUS_CONFIG = 2", "SAS_STATUS_DATA = 3", "SAS_STATUS_NUMERIC = 4"] {
        assert!(header.contains(code), "{code}");
    }
}
