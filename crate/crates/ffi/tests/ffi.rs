use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mfbsde_ffi::*;

const TRIVIAL: &str = "mode = \"picard\"\nseed = 1\nn_paths = 200\n[grid]\nhorizon = 1.0\nsteps = 20\n[driver]\nkind = \"zero\"\n[terminal]\nkind = \"constant\"\nc = 1.0\n";

const ODE: &str = "mode = \"linear\"\nseed = 1\nn_paths = 100\n[grid]\nhorizon = 1.0\nsteps = 100\n[driver]\nkind = \"linear\"\nmean = \"full\"\n[terminal]\nkind = \"constant\"\nc = 2.0\n[linear]\nalpha1 = 0.1\nalpha2 = 0.2\n";

fn parse(text: &str) -> (MfbsdeStatus, *mut MfbsdeScenario) {
    let c = CString::new(text).unwrap();
    let mut h = ptr::null_mut();
    let s = unsafe { mfbsde_scenario_parse(c.as_ptr(), &mut h) };
    (s, h)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mfbsde_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(mfbsde_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn trivial_scenario_solves_to_one() {
    let (s, h) = parse(TRIVIAL);
    assert_eq!(s, MfbsdeStatus::Ok);
    let (mut y0, mut se) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { mfbsde_scenario_solve(h, &mut y0, &mut se) }, MfbsdeStatus::Ok);
    assert_eq!((y0, se), (1.0, 0.0));
    unsafe { mfbsde_scenario_free(h) };
}

#[test]
fn deterministic_linear_scenario_matches_the_ode() {
    let (s, h) = parse(ODE);
    assert_eq!(s, MfbsdeStatus::Ok, "{}", last_error());
    let (mut y0, mut se) = (0.0, 0.0);
    assert_eq!(unsafe { mfbsde_scenario_solve(h, &mut y0, &mut se) }, MfbsdeStatus::Ok, "{}", last_error());
    assert!((y0 - 2.0 * 0.3f64.exp()).abs() < 1e-3, "{y0}");
    unsafe { mfbsde_scenario_free(h) };
}

#[test]
fn validation_failures_report_every_key() {
    let (s, h) = parse("mode = \"picard\"\nn_paths = 0\nbogus = 1\n");
    assert_eq!(s, MfbsdeStatus::Validation);
    assert!(h.is_null());
    let msg = last_error();
    for key in ["n_paths", "bogus", "grid"] {
        assert!(msg.contains(key), "{key} not in {msg}");
    }
}

#[test]
fn null_arguments_are_rejected() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mfbsde_scenario_parse(ptr::null(), &mut h) }, MfbsdeStatus::InvalidArgument);
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { mfbsde_scenario_solve(ptr::null_mut(), &mut a, &mut b) }, MfbsdeStatus::InvalidArgument);
    assert_eq!(unsafe { mfbsde_scenario_set_seed(ptr::null_mut(), 3) }, MfbsdeStatus::InvalidArgument);
    let (_, h) = parse(TRIVIAL);
    assert_eq!(unsafe { mfbsde_scenario_set_paths(h, 0) }, MfbsdeStatus::InvalidArgument);
    assert_eq!(unsafe { mfbsde_run_exit_code(ptr::null()) }, -1);
    unsafe {
        mfbsde_scenario_free(h);
        mfbsde_scenario_free(ptr::null_mut());
        mfbsde_run_free(ptr::null_mut());
    }
}

#[test]
fn runs_write_files_and_report_hypothesis_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let (_, h) = parse(TRIVIAL);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { mfbsde_run(h, out.as_ptr(), &mut r) }, MfbsdeStatus::Ok);
    assert_eq!(unsafe { mfbsde_run_exit_code(r) }, 0);
    assert_eq!(unsafe { mfbsde_run_file_count(r) }, 3);
    let id = unsafe { CStr::from_ptr(mfbsde_run_id(r)) }.to_str().unwrap().to_string();
    assert_eq!(id.len(), 64);
    assert!(dir.path().join("manifest.json").exists());
    unsafe {
        mfbsde_run_free(r);
        mfbsde_scenario_free(h);
    }

    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/compare_jump_violation.toml")).unwrap();
    let (_, h) = parse(&text);
    unsafe { mfbsde_scenario_set_paths(h, 300) };
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { mfbsde_run(h, out.as_ptr(), &mut r) }, MfbsdeStatus::Hypothesis);
    assert_eq!(unsafe { mfbsde_run_exit_code(r) }, 4);
    assert!(last_error().contains("jump_est"));
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { mfbsde_scenario_solve(h, &mut a, &mut b) }, MfbsdeStatus::InvalidArgument);
    unsafe {
        mfbsde_run_free(r);
        mfbsde_scenario_free(h);
    }
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mfbsde.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["mfbsde_scenario_parse", "mfbsde_scenario_solve", "mfbsde_run", "mfbsde_last_error", "mfbsde_version", "MFBSDE_STATUS_HYPOTHESIS"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header.to_str().unwrap()]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
