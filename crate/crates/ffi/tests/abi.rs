use std::ffi::{CStr, CString};
use std::ptr;

use hsr_ffi::*;

fn last_error() -> Option<String> {
    let p = hsr_last_error();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { hsr_string_free(p) };
    Some(s)
}

#[test]
fn version_is_static_string() {
    let v = unsafe { CStr::from_ptr(hsr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn pure_functions_match_core() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(hsr_skew_accuracy(0.8, 0.0, &mut out), HsrStatus::Ok);
        assert!((out - 0.8).abs() < 1e-15);
        assert_eq!(hsr_bayes_filter_update(0.5, 0.8, HsrLabel::Out, &mut out), HsrStatus::Ok);
        assert!((out - 0.2).abs() < 1e-12);
        let probs = [0.9, 0.8];
        assert_eq!(hsr_item_out_prob(probs.as_ptr(), 2, &mut out), HsrStatus::Ok);
        assert!((out - 0.28).abs() < 1e-12);
        assert_eq!(hsr_beta_prob_better_than_random(11.0, 11.0, &mut out), HsrStatus::Ok);
        assert!((out - 0.5).abs() < 1e-9);
        let labels = [HsrLabel::Out, HsrLabel::Out];
        let acc = [0.8, 0.8];
        assert_eq!(hsr_nb_ensemble_prob(labels.as_ptr(), acc.as_ptr(), 2, &mut out), HsrStatus::Ok);
        assert!((out - 16.0 / 17.0).abs() < 1e-12);
        assert_eq!(hsr_price_ratio(3000, 10, 1000, 20.0, &mut out), HsrStatus::Ok);
        assert!((out - 0.16).abs() < 1e-12);
    }
    assert!(last_error().is_none());
}

#[test]
fn errors_set_status_and_message() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(hsr_skew_accuracy(0.3, 0.0, &mut out), HsrStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("base_accuracy"));
        assert_eq!(hsr_skew_accuracy(0.8, 0.0, ptr::null_mut()), HsrStatus::NullPointer);
        assert_eq!(hsr_item_out_prob(ptr::null(), 0, &mut out), HsrStatus::NullPointer);
        assert_eq!(hsr_item_out_prob([0.5].as_ptr(), 0, &mut out), HsrStatus::InvalidArgument);
    }
    // a success clears the message
    unsafe { hsr_skew_accuracy(0.8, 1.0, &mut out) };
    assert!(last_error().is_none());
    unsafe { hsr_string_free(ptr::null_mut()) };
}

#[test]
fn experiment_handle_lifecycle() {
    let cfg = CString::new(
        r#"{"repetitions": 2, "world": {"n_items": 200}, "strategies": ["SR", "HSR-NB"],
            "sweep": {"parameter": "correlation", "values": [0.0, 0.5]}}"#,
    )
    .unwrap();
    let mut exp: *mut HsrExperiment = ptr::null_mut();
    unsafe {
        assert_eq!(hsr_experiment_new(cfg.as_ptr(), &mut exp), HsrStatus::Ok);
        assert!(!exp.is_null());
        let mut n = 0usize;
        assert_eq!(hsr_experiment_point_count(exp, &mut n), HsrStatus::Ok);
        assert_eq!(n, 2);

        let hsr = CString::new("HSR-NB").unwrap();
        let loss = CString::new("loss").unwrap();
        let mut m = 0.0;
        assert_eq!(hsr_experiment_mean(exp, hsr.as_ptr(), loss.as_ptr(), 0, &mut m), HsrStatus::NotFound);

        assert_eq!(hsr_experiment_run(exp, 2), HsrStatus::Ok);
        assert_eq!(hsr_experiment_mean(exp, hsr.as_ptr(), loss.as_ptr(), 1, &mut m), HsrStatus::Ok);
        assert!((0.0..=10.0).contains(&m));
        assert_eq!(hsr_experiment_mean(exp, hsr.as_ptr(), loss.as_ptr(), 5, &mut m), HsrStatus::InvalidArgument);
        let bogus = CString::new("NOPE").unwrap();
        assert_eq!(hsr_experiment_mean(exp, bogus.as_ptr(), loss.as_ptr(), 0, &mut m), HsrStatus::Config);

        let mut csv: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(hsr_experiment_results_csv(exp, &mut csv), HsrStatus::Ok);
        let first = CStr::from_ptr(csv).to_str().unwrap().to_owned();
        hsr_string_free(csv);
        assert!(first.starts_with("sweep_value,strategy,metric,mean,std,n_ok,n_failed\n"));

        // rerun with the same seed is byte-identical; a new seed drops the old report
        assert_eq!(hsr_experiment_run(exp, 1), HsrStatus::Ok);
        assert_eq!(hsr_experiment_results_csv(exp, &mut csv), HsrStatus::Ok);
        assert_eq!(CStr::from_ptr(csv).to_str().unwrap(), first);
        hsr_string_free(csv);
        assert_eq!(hsr_experiment_set_seed(exp, 9), HsrStatus::Ok);
        assert_eq!(hsr_experiment_results_csv(exp, &mut csv), HsrStatus::NotFound);

        hsr_experiment_free(exp);
        hsr_experiment_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_is_rejected() {
    let mut exp: *mut HsrExperiment = ptr::null_mut();
    let cfg = CString::new(r#"{"repetitions": 0}"#).unwrap();
    unsafe {
        assert_eq!(hsr_experiment_new(cfg.as_ptr(), &mut exp), HsrStatus::Config);
        assert!(exp.is_null());
        let junk = CString::new("{not json").unwrap();
        assert_eq!(hsr_experiment_new(junk.as_ptr(), &mut exp), HsrStatus::Config);
        assert_eq!(hsr_experiment_new(ptr::null(), &mut exp), HsrStatus::NullPointer);
        assert_eq!(hsr_experiment_run(ptr::null_mut(), 0), HsrStatus::NullPointer);
    }
    assert!(last_error().unwrap().contains("null"));
}

#[test]
fn header_is_current_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/hsr.h")).unwrap();
    for name in [
        "hsr_version",
        "hsr_last_error",
        "hsr_string_free",
        "hsr_experiment_new",
        "hsr_experiment_run",
        "hsr_experiment_free",
        "typedef struct HsrExperiment HsrExperiment",
        "HSR_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // Compile a small C client against the header when a C compiler exists.
    let Ok(cc) = which_cc() else { return };
    let tmp = std::env::temp_dir().join(format!("hsr_ffi_header_{}.c", std::process::id()));
    std::fs::write(
        &tmp,
        "#include \"hsr.h\"\nint main(void) { double o; return hsr_skew_accuracy(0.8, 0.0, &o) == HSR_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&tmp)
        .status()
        .unwrap();
    let _ = std::fs::remove_file(&tmp);
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
