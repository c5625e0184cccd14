use std::ffi::{CStr, CString};
use std::ptr;

use avsnn_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(avsnn_last_error()) }.to_string_lossy().into_owned()
}

const AUDIO_ONLY: &str = r#"{"fusion_mode": "audio_only", "audio_hidden": 8, "n_as": 0, "n_s": 1, "cue_positions": [], "timesteps": 4}"#;

fn audio_model() -> *mut AvsnnModel {
    let cfg = CString::new(AUDIO_ONLY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { avsnn_model_new(cfg.as_ptr(), 7, &mut m) }, AvsnnStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_lifecycle_and_inference() {
    let m = audio_model();
    unsafe {
        assert_eq!(avsnn_model_timesteps(m), 4);
        assert_eq!(avsnn_model_num_classes(m), 10);
        assert!(avsnn_model_num_parameters(m) > 0);
        let audio: Vec<f64> = (0..4 * 40).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut logits = vec![0.0; 40];
        let st = avsnn_model_infer(m, ptr::null(), audio.as_ptr(), 4, logits.as_mut_ptr(), logits.len());
        assert_eq!(st, AvsnnStatus::Ok, "{}", last_error());
        let mut class = usize::MAX;
        assert_eq!(avsnn_predict(logits.as_ptr(), 4, 10, 0, &mut class), AvsnnStatus::Ok);
        assert!(class < 10);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(avsnn_model_save(m, path.as_ptr()), AvsnnStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(avsnn_model_load(path.as_ptr(), &mut m2), AvsnnStatus::Ok);
        let mut logits2 = vec![0.0; 40];
        avsnn_model_infer(m2, ptr::null(), audio.as_ptr(), 4, logits2.as_mut_ptr(), 40);
        assert_eq!(logits, logits2);
        avsnn_model_free(m2);
        avsnn_model_free(m);
        avsnn_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let m = audio_model();
    unsafe {
        let mut small = vec![0.0; 3];
        let audio = vec![0.0; 160];
        let st = avsnn_model_infer(m, ptr::null(), audio.as_ptr(), 4, small.as_mut_ptr(), 3);
        assert_eq!(st, AvsnnStatus::InvalidArgument);
        assert!(last_error().contains("logits buffer"));
        let mut full = vec![0.0; 40];
        let st = avsnn_model_infer(m, ptr::null(), ptr::null(), 4, full.as_mut_ptr(), 40);
        assert_eq!(st, AvsnnStatus::Contract, "{}", last_error());
        assert_eq!(avsnn_model_infer(ptr::null_mut(), ptr::null(), ptr::null(), 4, ptr::null_mut(), 0), AvsnnStatus::NullPointer);

        let bad = CString::new(r#"{"timesteps": 0}"#).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(avsnn_model_new(bad.as_ptr(), 0, &mut out), AvsnnStatus::Config);
        let unknown = CString::new(r#"{"bogus": 1}"#).unwrap();
        assert_eq!(avsnn_model_new(unknown.as_ptr(), 0, &mut out), AvsnnStatus::Json);
        assert!(out.is_null());

        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(avsnn_model_load(missing.as_ptr(), &mut out), AvsnnStatus::Checkpoint);
        assert!(last_error().contains("/nonexistent/x.ckpt"));
        avsnn_model_free(m);
    }
}

#[test]
fn energy_and_fbank() {
    assert!((avsnn_energy_from_counts(36.7e6, 1076.2e6) - 1.10).abs() < 0.005);
    let n = 44_100;
    let samples: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
    let bins = avsnn_mel_bins();
    let mut out = vec![1.0; 28 * bins];
    let st = unsafe { avsnn_fbank(samples.as_ptr(), n, 44_100, 28, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, AvsnnStatus::Ok, "{}", last_error());
    assert!(out[12 * bins..].iter().all(|&v| v == 0.0));
    assert!(out[..12 * bins].iter().any(|&v| v != 0.0));
    let silent = vec![0.0; 0];
    let st = unsafe { avsnn_fbank(silent.as_ptr(), 0, 44_100, 28, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, AvsnnStatus::EmptyInput);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/avsnn.h")).unwrap();
    for f in ["avsnn_model_new", "avsnn_model_load", "avsnn_model_free", "avsnn_model_infer", "avsnn_predict", "avsnn_fbank", "avsnn_last_error"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"avsnn.h\"\nint main(void) { AvsnnModel *m = 0; return avsnn_model_new(0, 1, &m) == AVSNN_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", dir.join("include").display()))
        .arg(&src)
        .status()
    {
        Ok(s) => assert!(s.success(), "header does not compile as C"),
        Err(_) => eprintln!("no C compiler found; skipped syntax check"),
    }
}
