use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rsb_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rsb_last_error()) }.to_str().unwrap().to_owned()
}

fn params(beta: f64, c: usize) -> *mut RsbParams {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { rsb_params_new(beta, c, false, &mut p) }, RsbStatus::Ok);
    p
}

#[test]
fn psi_at_zero_field() {
    let p = params(1.0, 1);
    let (mut edge, mut vertex) = (0.0, 0.0);
    let s = unsafe { rsb_psi(p, [1i8].as_ptr(), 1, [0.0, 0.0].as_ptr(), 2, &mut edge, &mut vertex) };
    assert_eq!(s, RsbStatus::Ok);
    assert!((edge - (4.0 * 1f64.cosh()).ln()).abs() < 1e-12);
    assert!((vertex - 2.0 * edge).abs() < 1e-12);
    unsafe { rsb_params_free(p) };
}

#[test]
fn errors_map_to_codes() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { rsb_params_new(-1.0, 2, false, &mut p) }, RsbStatus::InvalidParameter);
    assert!(p.is_null());
    assert!(last_error().contains("beta"));

    let p = params(1.0, 2);
    let (mut e, mut v) = (0.0, 0.0);
    let s = unsafe { rsb_psi(p, [1i8, 1].as_ptr(), 2, [0.0; 3].as_ptr(), 3, &mut e, &mut v) };
    assert_ne!(s, RsbStatus::Ok);
    let s = unsafe { rsb_psi(p, ptr::null(), 2, [0.0; 4].as_ptr(), 4, &mut e, &mut v) };
    assert_eq!(s, RsbStatus::NullPointer);
    unsafe { rsb_params_free(p) };

    let bad = CString::new("{not json").unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { rsb_tree_from_json(bad.as_ptr(), &mut t) }, RsbStatus::Parse);
    unsafe { rsb_tree_free(ptr::null_mut()) };
}

#[test]
fn krsb_and_full_rsb_agree_on_a_point_tree() {
    // one leaf per level at m = 0: both functionals reduce to the zero-field value
    let json = CString::new(r#"{"w":[1.0],"children":[{"w":[1.0],"children":[{"m":0.0}]}]}"#).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { rsb_tree_from_json(json.as_ptr(), &mut t) }, RsbStatus::Ok, "{}", last_error());
    let mut depth = 0;
    assert_eq!(unsafe { rsb_tree_depth(t, &mut depth) }, RsbStatus::Ok);
    assert_eq!(depth, 2);

    let p = params(1.0, 2);
    let x = [0.0, 0.5, 1.0];
    let mut exact = RsbEstimate::default();
    let s = unsafe { rsb_krsb_functional(t, x.as_ptr(), 3, p, 0, 0, 0, 1, &mut exact) };
    assert_eq!(s, RsbStatus::Ok, "{}", last_error());
    let reference = 4f64.ln() + 2.0 * 1f64.cosh().ln();
    assert!((exact.value - reference).abs() < 1e-9);

    let q = [0.0, 0.5, 1.0];
    let mut mu = ptr::null_mut();
    assert_eq!(
        unsafe { rsb_measure_new(q.as_ptr(), 3, x[1..].as_ptr(), 2, &mut mu) },
        RsbStatus::Ok,
        "{}",
        last_error()
    );
    let mut cdf = 0.0;
    assert_eq!(unsafe { rsb_measure_cdf(mu, 0.3, &mut cdf) }, RsbStatus::Ok);
    assert_eq!(cdf, 0.5);
    let mut full = RsbEstimate::default();
    let s = unsafe { rsb_full_rsb(t, q.as_ptr(), 3, mu, p, 0, 128, 4, 2, &mut full) };
    assert_eq!(s, RsbStatus::Ok, "{}", last_error());
    assert!((full.value - reference).abs() < 1e-9);
    unsafe {
        rsb_measure_free(mu);
        rsb_tree_free(t);
        rsb_params_free(p);
    }
}

#[test]
fn rs_optimum_and_oracle() {
    let p = params(0.5, 3);
    let (mut m, mut value) = (0.0, 0.0);
    assert_eq!(unsafe { rsb_optimize_rs(p, 0, 60, 3, &mut m, &mut value) }, RsbStatus::Ok);
    assert!((0.0..1.0).contains(&m) && value.is_finite());
    unsafe { rsb_params_free(p) };

    let mut q = RsbEstimate::default();
    assert_eq!(unsafe { rsb_quenched_estimate(8, 3, 0.5, 4, 9, &mut q) }, RsbStatus::Ok);
    assert_eq!(q.n_samples, 4);
    assert!(q.value > 2f64.ln());
    assert_eq!(unsafe { rsb_quenched_estimate(40, 3, 0.5, 1, 9, &mut q) }, RsbStatus::SizeGuard);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rsb.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "rsb_last_error",
        "rsb_version",
        "rsb_params_new",
        "rsb_params_free",
        "rsb_psi",
        "rsb_tree_from_json",
        "rsb_tree_depth",
        "rsb_tree_free",
        "rsb_krsb_functional",
        "rsb_measure_new",
        "rsb_measure_from_json",
        "rsb_measure_cdf",
        "rsb_measure_free",
        "rsb_full_rsb",
        "rsb_optimize_rs",
        "rsb_quenched_estimate",
    ] {
        assert!(text.contains(&format!("{f}(")), "missing {f}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
