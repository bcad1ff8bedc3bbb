use std::ffi::{CStr, CString};
use std::ptr;

use driftcast_ffi::*;

const GEN: &str = r#"{"n_entities": 4, "n_clusters": 2, "d": 3, "days": 60, "seed": 3}"#;
const RUN: &str = r#"{
  "model": {"n_k": 8, "channels": 8, "n_blocks": 1, "n_basis": 4},
  "horizon": {"t_p": 48, "t_a": 24, "t_b": 24, "label_delay_days": 10},
  "train": {"offline_epochs": 1, "batch_size": 8, "n_iter": 2, "offline_days": 30,
            "anchor_stride": 12, "error_subsample": 50, "scheme": "uniform:low_error"}
}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = dc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn dataset() -> *mut DcDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dc_dataset_generate(c(GEN).as_ptr(), &mut ds) }, DcStatus::Ok);
    assert!(!ds.is_null());
    ds
}

fn trained(ds: *const DcDataset) -> *mut DcSimulation {
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { dc_train_offline(ds, c(RUN).as_ptr(), &mut sim) }, DcStatus::Ok);
    sim
}

fn predictions(sim: *const DcSimulation, ds: *const DcDataset) -> Vec<DcPrediction> {
    let mut n = 0;
    unsafe {
        assert_eq!(dc_simulation_prediction_count(sim, &mut n), DcStatus::Ok);
        let mut buf = vec![
            DcPrediction {
                day: 0,
                entity: 0,
                offset: 0,
                predicted: 0.0
            };
            n
        ];
        let mut written = 0;
        assert_eq!(
            dc_simulation_predictions(sim, ds, buf.as_mut_ptr(), buf.len(), &mut written),
            DcStatus::Ok
        );
        assert_eq!(written, n);
        buf
    }
}

#[test]
fn dataset_accessors_and_round_trip() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("data").to_str().unwrap());
    unsafe {
        let (mut n, mut hours) = (0, 0);
        assert_eq!(dc_dataset_entity_count(ds, &mut n), DcStatus::Ok);
        assert_eq!(dc_dataset_hours(ds, &mut hours), DcStatus::Ok);
        assert_eq!((n, hours), (4, 60 * 24));
        assert!(dc_last_error_message().is_null());

        assert_eq!(dc_dataset_save(ds, path.as_ptr()), DcStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(dc_dataset_load(path.as_ptr(), &mut loaded), DcStatus::Ok);
        assert_eq!(dc_dataset_hours(loaded, &mut hours), DcStatus::Ok);
        assert_eq!(hours, 60 * 24);
        dc_dataset_free(loaded);
        dc_dataset_free(ds);
        dc_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(dc_dataset_generate(c("{\"bogus\": 1}").as_ptr(), &mut ds), DcStatus::Config);
        assert!(last_error().contains("bogus"));
        assert!(ds.is_null());

        assert_eq!(dc_dataset_generate(c("{\"n_clusters\": 0}").as_ptr(), &mut ds), DcStatus::Config);
        assert_eq!(dc_dataset_generate(ptr::null(), ptr::null_mut()), DcStatus::NullPointer);
        assert!(last_error().contains("out"));

        let bad_utf8 = [0xffu8, 0];
        assert_eq!(dc_dataset_load(bad_utf8.as_ptr().cast(), &mut ds), DcStatus::InvalidUtf8);

        let dir = tempfile::tempdir().unwrap();
        let missing = c(dir.path().join("nope").to_str().unwrap());
        let status = dc_dataset_load(missing.as_ptr(), &mut ds);
        assert!(matches!(status, DcStatus::Io | DcStatus::Parse), "{status:?}");

        let mut sim = ptr::null_mut();
        assert_eq!(dc_simulation_load(missing.as_ptr(), &mut sim), DcStatus::Io);

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint at all").unwrap();
        assert_eq!(
            dc_simulation_load(c(junk.to_str().unwrap()).as_ptr(), &mut sim),
            DcStatus::Integrity
        );

        let mut n = 0;
        assert_eq!(dc_simulation_day(ptr::null(), &mut n), DcStatus::NullPointer);
    }
}

#[test]
fn simulation_runs_and_resumes_bitwise() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = c(dir.path().join("mid.ckpt").to_str().unwrap());
    unsafe {
        let sim = trained(ds);
        let mut day = 0;
        assert_eq!(dc_simulation_day(sim, &mut day), DcStatus::Ok);
        assert_eq!(day, 30);

        assert_eq!(dc_simulation_run_days(sim, ds, 3), DcStatus::Ok);
        assert_eq!(dc_simulation_save(sim, ckpt.as_ptr()), DcStatus::Ok);
        assert_eq!(dc_simulation_run_days(sim, ds, 3), DcStatus::Ok);
        let straight = predictions(sim, ds);
        assert_eq!(straight.len(), 6 * 4 * 48);
        assert!(straight.iter().all(|p| p.predicted.is_finite() && p.entity < 4));

        let mut resumed = ptr::null_mut();
        assert_eq!(dc_simulation_load(ckpt.as_ptr(), &mut resumed), DcStatus::Ok);
        assert_eq!(dc_simulation_run_days(resumed, ds, 3), DcStatus::Ok);
        let again = predictions(resumed, ds);
        assert_eq!(straight.len(), again.len());
        for (a, b) in straight.iter().zip(&again) {
            assert_eq!((a.day, a.entity, a.offset), (b.day, b.entity, b.offset));
            assert_eq!(a.predicted.to_bits(), b.predicted.to_bits());
        }

        let log = dir.path().join("log.csv");
        assert_eq!(dc_simulation_write_log(sim, c(log.to_str().unwrap()).as_ptr()), DcStatus::Ok);
        let text = std::fs::read_to_string(&log).unwrap();
        assert_eq!(text.lines().count(), straight.len() + 1);

        dc_simulation_free(resumed);
        dc_simulation_free(sim);
        dc_dataset_free(ds);
    }
}

#[test]
fn small_buffer_and_bad_policy_leave_state_alone() {
    let ds = dataset();
    unsafe {
        let sim = trained(ds);
        assert_eq!(dc_simulation_run_days(sim, ds, 1), DcStatus::Ok);
        let mut written = 0;
        assert_eq!(
            dc_simulation_predictions(sim, ds, ptr::null_mut(), 0, &mut written),
            DcStatus::BufferTooSmall
        );
        assert_eq!(written, 4 * 48);

        assert_eq!(dc_simulation_set_policy(sim, c("sideways:uniform").as_ptr()), DcStatus::Config);
        assert_eq!(dc_simulation_set_policy(sim, c("frozen").as_ptr()), DcStatus::Ok);

        let mut day = 0;
        assert_eq!(dc_simulation_run_days(sim, ds, 1000), DcStatus::InvalidInput);
        assert_eq!(dc_simulation_day(sim, &mut day), DcStatus::Ok);
        assert_eq!(day, 31);

        dc_simulation_free(sim);
        dc_dataset_free(ds);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(dc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let root = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{root}/include/driftcast.h")).unwrap();
    let source = std::fs::read_to_string(format!("{root}/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct DcDataset DcDataset", "typedef struct DcSimulation DcSimulation", "DC_STATUS_OK = 0"] {
        assert!(header.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c() {
    let root = env!("CARGO_MANIFEST_DIR");
    let out = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", &format!("{root}/include/driftcast.h")])
        .output();
    match out {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
