use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use infoprune::zoo;
use infoprune_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { ip_string_free(p) };
    s
}

fn last_error() -> String {
    take_string(ip_last_error_message())
}

fn synth(dir: &Path) -> CString {
    let path = dir.join("model");
    zoo::random_residual(5).unwrap().save(&path).unwrap();
    c(path.to_str().unwrap())
}

#[test]
fn full_pipeline_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ip_model_load(path.as_ptr(), &mut model), IpStatus::Ok);
        assert!(ip_last_error_message().is_null());

        let (mut params, mut flops) = (0u64, 0u64);
        assert_eq!(ip_model_costs(model, &mut params, &mut flops), IpStatus::Ok);
        assert!(params > 0 && flops > 0);

        let mut scores = ptr::null_mut();
        assert_eq!(ip_score(model, 0.8, 0, ptr::null(), &mut scores), IpStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(ip_scores_to_json(scores, &mut json), IpStatus::Ok);
        assert!(take_string(json).contains("\"layer_id\": \"stem\""));

        let mut plan = ptr::null_mut();
        let rates = c(r#"{"global": 0.5}"#);
        assert_eq!(ip_plan_build(model, scores, rates.as_ptr(), c("least").as_ptr(), 0, &mut plan), IpStatus::Ok);

        let mut plan_json = ptr::null_mut();
        assert_eq!(ip_plan_to_json(plan, &mut plan_json), IpStatus::Ok);
        let plan_text = c(&take_string(plan_json));
        let mut plan2 = ptr::null_mut();
        assert_eq!(ip_plan_from_json(plan_text.as_ptr(), &mut plan2), IpStatus::Ok);

        let mut pruned = ptr::null_mut();
        assert_eq!(ip_apply(model, plan2, &mut pruned), IpStatus::Ok);
        let mut dev = f64::NAN;
        assert_eq!(ip_verify(model, plan, pruned, 5, 1, 1e-4, &mut dev), IpStatus::Ok);
        assert!(dev <= 1e-4);

        let (mut pp, mut pf) = (0u64, 0u64);
        assert_eq!(ip_model_costs(pruned, &mut pp, &mut pf), IpStatus::Ok);
        assert!(pp < params && pf < flops);

        let out = c(dir.path().join("pruned").to_str().unwrap());
        assert_eq!(ip_apply_and_save(model, plan, out.as_ptr()), IpStatus::Ok);
        assert!(dir.path().join("pruned/provenance.json").exists());

        let mut reloaded = ptr::null_mut();
        assert_eq!(ip_model_load(out.as_ptr(), &mut reloaded), IpStatus::Ok);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(ip_model_fingerprint(reloaded, &mut a), IpStatus::Ok);
        assert_eq!(ip_model_fingerprint(pruned, &mut b), IpStatus::Ok);
        assert_eq!(take_string(a), take_string(b));

        // the plan no longer matches the pruned archive
        let mut again = ptr::null_mut();
        assert_eq!(ip_apply(pruned, plan, &mut again), IpStatus::PlanMismatch);
        assert!(last_error().contains("plan/archive mismatch"));
        assert!(again.is_null());

        for m in [model, pruned, reloaded] {
            ip_model_free(m);
        }
        ip_scores_free(scores);
        ip_plan_free(plan);
        ip_plan_free(plan2);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ip_model_load(c("/nonexistent/archive").as_ptr(), &mut model), IpStatus::Io);
        assert!(last_error().contains("missing file"));
        assert!(model.is_null());

        assert_eq!(ip_model_load(ptr::null(), &mut model), IpStatus::InvalidArgument);
        assert_eq!(ip_model_load(c("x").as_ptr(), ptr::null_mut()), IpStatus::InvalidArgument);

        let mut plan = ptr::null_mut();
        assert_eq!(ip_plan_from_json(c("{").as_ptr(), &mut plan), IpStatus::Validation);

        let mut k = 0usize;
        assert_eq!(ip_keep_count(0.5, 7, &mut k), IpStatus::Ok);
        assert_eq!(k, 4);
        assert_eq!(ip_keep_count(1.0, 7, &mut k), IpStatus::Validation);

        // null handles are no-ops for the free functions
        ip_model_free(ptr::null_mut());
        ip_scores_free(ptr::null_mut());
        ip_plan_free(ptr::null_mut());
        ip_string_free(ptr::null_mut());
    }
}

#[test]
fn bad_options_are_invalid_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ip_model_load(path.as_ptr(), &mut model), IpStatus::Ok);
        let mut scores = ptr::null_mut();
        assert_eq!(ip_score(model, 0.8, 0, c("hamming").as_ptr(), &mut scores), IpStatus::InvalidArgument);
        assert_eq!(ip_score(model, 0.8, 2, c("cosine").as_ptr(), &mut scores), IpStatus::Ok);
        let mut plan = ptr::null_mut();
        let rates = c(r#"{"global": 0.5}"#);
        assert_eq!(ip_plan_build(model, scores, rates.as_ptr(), c("biggest").as_ptr(), 0, &mut plan), IpStatus::InvalidArgument);
        let bad = c(r#"{"globl": 0.5}"#);
        assert_eq!(ip_plan_build(model, scores, bad.as_ptr(), ptr::null(), 0, &mut plan), IpStatus::Validation);
        assert!(plan.is_null());
        ip_scores_free(scores);
        ip_model_free(model);
    }
}

#[test]
fn header_declares_every_export() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/infoprune.h");
    let header = std::fs::read_to_string(&header_path).unwrap();
    for f in [
        "ip_last_error_message",
        "ip_string_free",
        "ip_model_load",
        "ip_model_save",
        "ip_model_free",
        "ip_model_fingerprint",
        "ip_model_costs",
        "ip_score",
        "ip_scores_to_json",
        "ip_scores_free",
        "ip_plan_build",
        "ip_plan_to_json",
        "ip_plan_from_json",
        "ip_plan_free",
        "ip_apply",
        "ip_apply_and_save",
        "ip_verify",
        "ip_keep_count",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct IpModel IpModel;"));

    // syntax-check the header with the system C compiler when there is one
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header_path).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
