use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vig_ffi::*;

fn last_error() -> String {
    let p = vig_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn micro() -> *mut VigModel {
    let name = CString::new("micro").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vig_model_from_preset(name.as_ptr(), 3, &mut m) }, VigStatus::Ok);
    assert!(!m.is_null());
    m
}

fn image(h: usize, w: usize) -> Vec<f32> {
    (0..h * w * 3).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()
}

#[test]
fn preset_shape_and_counts() {
    let m = micro();
    let (mut h, mut w, mut c) = (0, 0, 0);
    unsafe {
        assert_eq!(vig_model_shape(m, &mut h, &mut w, &mut c), VigStatus::Ok);
        assert_eq!((h, w, c), (12, 12, 10));
        let mut params = 0;
        assert_eq!(vig_model_param_count(m, &mut params), VigStatus::Ok);
        assert!(params > 0);
        let mut macs = 0;
        assert_eq!(vig_model_mac_count(m, 12, 12, &mut macs), VigStatus::Ok);
        assert!(macs > params);
        assert_eq!(vig_model_mac_count(m, 13, 12, &mut macs), VigStatus::Config);
        assert!(last_error().contains("image_size"));
        vig_model_free(m);
    }
}

#[test]
fn unknown_preset_and_bad_config_fail() {
    let mut m = ptr::null_mut();
    let name = CString::new("vig-xl").unwrap();
    assert_eq!(unsafe { vig_model_from_preset(name.as_ptr(), 0, &mut m) }, VigStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("vig-xl"));

    let json = CString::new(r#"{"preset": "micro", "heads": 3}"#).unwrap();
    assert_eq!(unsafe { vig_model_from_config(json.as_ptr(), 0, &mut m) }, VigStatus::Config);
    let json = CString::new(r#"{"preset": "micro", "colour": 1}"#).unwrap();
    assert_eq!(unsafe { vig_model_from_config(json.as_ptr(), 0, &mut m) }, VigStatus::Config);
    assert!(last_error().contains("colour"));
    let json = CString::new(r#"{"preset": "micro", "k_max": 5}"#).unwrap();
    assert_eq!(unsafe { vig_model_from_config(json.as_ptr(), 0, &mut m) }, VigStatus::Ok);
    unsafe { vig_model_free(m) };
}

#[test]
fn null_pointers_are_reported() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(vig_model_from_preset(ptr::null(), 0, &mut m), VigStatus::NullPointer);
        let mut n = 0;
        assert_eq!(vig_model_param_count(ptr::null(), &mut n), VigStatus::NullPointer);
        vig_model_free(ptr::null_mut());
    }
}

#[test]
fn predict_matches_library() {
    let m = micro();
    let img = image(12, 12);
    let mut logits = vec![0f32; 20];
    let mut two = img.clone();
    two.extend(img.iter().map(|v| -v));
    unsafe {
        assert_eq!(vig_model_predict(m, two.as_ptr(), 2, logits.as_mut_ptr(), 20), VigStatus::Ok);
        assert_eq!(vig_model_predict(m, two.as_ptr(), 2, logits.as_mut_ptr(), 19), VigStatus::BufferTooSmall);
    }
    let reference = vig::model::Model::<f32>::new(vig::model::preset("micro").unwrap(), 3).unwrap();
    let want = reference.predict(&vig::Tensor::new([2, 12, 12, 3], two).unwrap()).unwrap();
    assert_eq!(logits, want.data());
    unsafe { vig_model_free(m) };
}

#[test]
fn graph_table_and_sizing() {
    let m = micro();
    let img = image(12, 12);
    let (mut n, mut k) = (0, 0);
    unsafe {
        assert_eq!(
            vig_model_graph(m, img.as_ptr(), 1, ptr::null_mut(), 0, &mut n, &mut k),
            VigStatus::BufferTooSmall
        );
        assert_eq!((n, k), (9, 3));
        let mut table = vec![u32::MAX; n * k];
        assert_eq!(
            vig_model_graph(m, img.as_ptr(), 2, table.as_mut_ptr(), table.len(), &mut n, &mut k),
            VigStatus::Ok
        );
        for (i, row) in table.chunks(k).enumerate() {
            assert!(row.iter().all(|&j| (j as usize) < n && j as usize != i));
        }
        assert_eq!(
            vig_model_graph(m, img.as_ptr(), 3, table.as_mut_ptr(), table.len(), &mut n, &mut k),
            VigStatus::Index
        );
        assert!(last_error().contains("1..=2"));
        vig_model_free(m);
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.vigc").to_str().unwrap()).unwrap();
    let m = micro();
    let img = image(12, 12);
    let (mut a, mut b) = (vec![0f32; 10], vec![0f32; 10]);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(vig_model_save(m, path.as_ptr()), VigStatus::Ok);
        assert_eq!(vig_model_load(path.as_ptr(), &mut back), VigStatus::Ok);
        vig_model_predict(m, img.as_ptr(), 1, a.as_mut_ptr(), 10);
        vig_model_predict(back, img.as_ptr(), 1, b.as_mut_ptr(), 10);
        vig_model_free(m);
        vig_model_free(back);
        let missing = CString::new("/nonexistent/x.vigc").unwrap();
        assert_eq!(vig_model_load(missing.as_ptr(), &mut back), VigStatus::Io);
    }
    assert_eq!(a, b);
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(vig_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vig.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["vig_model_from_preset", "vig_model_predict", "vig_model_graph", "vig_last_error"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"]).arg(&header).output()
    else {
        eprintln!("no C compiler found; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
