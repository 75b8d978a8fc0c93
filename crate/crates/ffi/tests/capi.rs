use std::ffi::{CStr, CString};
use std::ptr;

use harmony_core::checkpoint::Checkpoint;
use harmony_core::diffcore::DenoiserConfig;
use harmony_core::envlight::{write_envmap, EnvMap};
use harmony_core::lightcond::LightCondConfig;
use harmony_core::model::{HarmonyModel, ModelConfig, StageTag};
use harmony_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = hr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn envmap_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.envm");
    write_envmap(&EnvMap::constant(16, [2.0, 1.0, 0.5]), &path).unwrap();
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(hr_envmap_load(cstr(&path).as_ptr(), &mut env), HrStatus::Ok);
        let (mut h, mut w) = (0, 0);
        assert_eq!(hr_envmap_size(env, &mut h, &mut w), HrStatus::Ok);
        assert_eq!((h, w), (16, 32));

        let mut e = [0.0f32; 3];
        assert_eq!(hr_envmap_irradiance(env, 0.0, 1.0, 0.0, e.as_mut_ptr()), HrStatus::Ok);
        let pi = std::f32::consts::PI;
        for (got, want) in e.iter().zip([2.0 * pi, pi, 0.5 * pi]) {
            assert!((got - want).abs() < 0.01 * want, "{got} vs {want}");
        }
        assert_eq!(hr_envmap_irradiance(env, 0.0, 2.0, 0.0, e.as_mut_ptr()), HrStatus::InvalidArgument);
        assert!(last_error().contains("unit"));

        let mut rotated = ptr::null_mut();
        assert_eq!(hr_envmap_rotate(env, 1.0, &mut rotated), HrStatus::Ok);
        let mut px = vec![0.0f32; 8 * 8 * 3];
        assert_eq!(hr_envmap_project(rotated, 60.0, 0.0, 0.0, 8, 8, 0, px.as_mut_ptr()), HrStatus::Ok);
        assert!(px.chunks(3).all(|c| c == [2.0, 1.0, 0.5]));
        assert_eq!(hr_envmap_project(rotated, 500.0, 0.0, 0.0, 8, 8, 1, px.as_mut_ptr()), HrStatus::InvalidArgument);
        hr_envmap_free(rotated);
        hr_envmap_free(env);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(hr_envmap_load(ptr::null(), &mut env), HrStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.envm").unwrap();
        assert_eq!(hr_envmap_load(missing.as_ptr(), &mut env), HrStatus::Io);
        assert!(env.is_null());
        assert!(last_error().contains("nonexistent"));
        hr_envmap_free(ptr::null_mut());
        hr_model_free(ptr::null_mut());
    }
}

#[test]
fn metrics() {
    let a = vec![0.5f32; 12 * 12 * 3];
    let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
    let (mut p, mut s) = (0.0, 0.0);
    unsafe {
        assert_eq!(hr_psnr(a.as_ptr(), b.as_ptr(), 12, 12, 3, &mut p), HrStatus::Ok);
        assert_eq!(hr_ssim(a.as_ptr(), a.as_ptr(), 12, 12, 3, &mut s), HrStatus::Ok);
        assert_eq!(hr_psnr(a.as_ptr(), ptr::null(), 12, 12, 3, &mut p), HrStatus::NullPointer);
    }
    assert!((p - 20.0).abs() < 1e-4, "{p}");
    assert!((s - 1.0).abs() < 1e-9);
}

#[test]
fn harmonize_through_a_model_handle() {
    let cfg = ModelConfig {
        denoiser: DenoiserConfig { image_size: 16, base_channels: 4, emb_dim: 8, groups: 2, ..Default::default() },
        lightcond: LightCondConfig { feature_channels: 4, extractor_hidden: [4, 4], groups: 2 },
        schedule_steps: 20,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(StageTag::Final, HarmonyModel::new(&cfg, 0).unwrap(), 0).save(&path).unwrap();
    let (w, h) = (20u32, 12u32);
    let fg = vec![0.8f32; (w * h * 3) as usize];
    let bg = vec![0.2f32; (w * h * 3) as usize];
    let mask = vec![1.0f32; (w * h) as usize];
    let mut out = vec![-1.0f32; (w * h * 3) as usize];
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(hr_model_load(cstr(&path).as_ptr(), &mut m), HrStatus::Ok);
        let mut s = 0;
        assert_eq!(hr_model_image_size(m, &mut s), HrStatus::Ok);
        assert_eq!(s, 16);
        let st = hr_harmonize(m, fg.as_ptr(), mask.as_ptr(), bg.as_ptr(), w, h, 2, 7, out.as_mut_ptr());
        assert_eq!(st, HrStatus::Ok);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let st = hr_harmonize(m, fg.as_ptr(), mask.as_ptr(), bg.as_ptr(), w, h, 0, 7, out.as_mut_ptr());
        assert_eq!(st, HrStatus::InvalidArgument);
        hr_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/harmony.h")).unwrap();
    for name in [
        "HR_STATUS_OK",
        "typedef struct HrEnvMap HrEnvMap",
        "typedef struct HrModel HrModel",
        "hr_last_error",
        "hr_envmap_load",
        "hr_envmap_irradiance",
        "hr_envmap_project",
        "hr_model_load",
        "hr_harmonize",
        "hr_psnr",
        "hr_ssim",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
