use std::ffi::{c_char, CStr, CString};
use std::ptr;

use infovla_ffi::*;

fn last_error() -> String {
    let p = infovla_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { infovla_string_free(p) };
    s
}

const CSV: &str = "task,base,step1\nT0,0.800000,0.600000\nT1,,0.900000\n";

#[test]
fn matrix_round_trips_through_csv() {
    let text = CString::new(CSV).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { infovla_matrix_from_csv(text.as_ptr(), &mut m) }, InfovlaStatus::Ok);
    let (mut tasks, mut stages) = (0, 0);
    assert_eq!(unsafe { infovla_matrix_shape(m, &mut tasks, &mut stages) }, InfovlaStatus::Ok);
    assert_eq!((tasks, stages), (2, 2));
    let mut v = 0.0;
    assert_eq!(unsafe { infovla_matrix_get(m, 0, 1, &mut v) }, InfovlaStatus::Ok);
    assert_eq!(v, 0.6);
    assert_eq!(unsafe { infovla_matrix_get(m, 1, 0, &mut v) }, InfovlaStatus::Undefined);
    assert_eq!(unsafe { infovla_matrix_get(m, 5, 0, &mut v) }, InfovlaStatus::InvalidArgument);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { infovla_matrix_to_csv(m, &mut out) }, InfovlaStatus::Ok);
    assert_eq!(take_string(out), CSV);
    let mut metrics = InfovlaMetrics::default();
    assert_eq!(unsafe { infovla_matrix_metrics(m, &mut metrics) }, InfovlaStatus::Ok);
    assert!((metrics.faa - 0.75).abs() < 1e-12);
    assert!((metrics.fwt - 0.85).abs() < 1e-12);
    unsafe { infovla_matrix_free(m) };
}

#[test]
fn matrix_from_values_matches_csv() {
    let values = [0.8, 0.6, 0.0, 0.9];
    let defined = [1u8, 1, 0, 1];
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { infovla_matrix_new(2, 2, values.as_ptr(), defined.as_ptr(), &mut m) },
        InfovlaStatus::Ok
    );
    let mut out = ptr::null_mut();
    unsafe { infovla_matrix_to_csv(m, &mut out) };
    assert_eq!(take_string(out), CSV);
    unsafe { infovla_matrix_free(m) };
}

#[test]
fn malformed_input_sets_status_and_message() {
    let text = CString::new("task,base\nT0,1.5\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { infovla_matrix_from_csv(text.as_ptr(), &mut m) }, InfovlaStatus::Format);
    assert!(m.is_null());
    assert!(last_error().contains("outside [0, 1]"), "{}", last_error());
    assert_eq!(unsafe { infovla_matrix_from_csv(ptr::null(), &mut m) }, InfovlaStatus::NullPointer);
    assert_eq!(unsafe { infovla_matrix_metrics(ptr::null(), ptr::null_mut()) }, InfovlaStatus::NullPointer);
}

#[test]
fn average_accuracy_from_stage_means() {
    let er = [0.808, 0.643, 0.780, 0.723, 0.698, 0.666];
    let mut aa = 0.0;
    assert_eq!(unsafe { infovla_aa_from_stage_averages(er.as_ptr(), er.len(), &mut aa) }, InfovlaStatus::Ok);
    assert!((100.0 * aa - 72.0).abs() <= 0.05);
    assert_eq!(
        unsafe { infovla_aa_from_stage_averages(er.as_ptr(), 0, &mut aa) },
        InfovlaStatus::InvalidArgument
    );
}

#[test]
fn config_handles_validate_and_serialize() {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { infovla_config_preset(InfovlaPreset::Ci, &mut c) }, InfovlaStatus::Ok);
    assert_eq!(unsafe { infovla_config_set_strategy(c, InfovlaStrategy::Er) }, InfovlaStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { infovla_config_to_json(c, &mut json) }, InfovlaStatus::Ok);
    let json = take_string(json);
    assert!(json.contains("\"strategy\": \"er\""));

    let text = CString::new(json).unwrap();
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { infovla_config_from_json(text.as_ptr(), &mut back) }, InfovlaStatus::Ok);
    unsafe { infovla_config_free(back) };

    assert_eq!(unsafe { infovla_config_set_seeds(c, [1u64, 1].as_ptr(), 2) }, InfovlaStatus::Ok);
    assert_eq!(unsafe { infovla_config_validate(c) }, InfovlaStatus::Config);
    assert!(last_error().contains("seeds"));
    unsafe { infovla_config_free(c) };

    let bad = CString::new(r#"{"train": {"lr": -1}}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { infovla_config_from_json(bad.as_ptr(), &mut out) }, InfovlaStatus::Config);
    assert!(last_error().contains("train.lr"));
}

#[test]
fn short_run_writes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let json = format!(
        r#"{{"strategy": "sequential", "seeds": [1], "output_dir": {:?},
            "benchmark": {{"n_tasks": 2, "base": 0, "steps": 2, "per_step": 1}},
            "policy": {{"latent_dim": 8, "expert_hidden": 16, "euler_steps": 3}},
            "train": {{"iterations_base": 3, "iterations_incremental": 2, "batch_size": 4,
                       "demos_per_task": 1, "eval_episodes": 2, "probe_count": 2}}}}"#,
        tmp.path()
    );
    let text = CString::new(json).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { infovla_config_from_json(text.as_ptr(), &mut c) }, InfovlaStatus::Ok, "{}", last_error());
    let mut mean = InfovlaMetrics::default();
    assert_eq!(unsafe { infovla_run(c, &mut mean) }, InfovlaStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&mean.faa));
    assert!(tmp.path().join("sequential/seed-1/R.csv").is_file());
    unsafe { infovla_config_free(c) };
}

#[test]
fn gradcheck_passes() {
    let mut ok = 0;
    assert_eq!(unsafe { infovla_gradcheck(1, 3, &mut ok) }, InfovlaStatus::Ok);
    assert_eq!(ok, 1);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(infovla_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
