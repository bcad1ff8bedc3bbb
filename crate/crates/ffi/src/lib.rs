//! C interface to the driftcast engine.
//!
//! Objects are opaque handles created and freed by this library. Every
//! fallible call returns a `DcStatus`; on failure the message is available
//! from `dc_last_error_message` on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use driftcast::checkpoint::{load_checkpoint, save_checkpoint};
use driftcast::cli::RunConfig;
use driftcast::data::Dataset;
use driftcast::sampling::CurveCache;
use driftcast::synthgen::{generate, GenConfig};
use driftcast::trainer::{train_offline, write_prediction_log, OnlinePolicy, SimulationState};
use driftcast::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Integrity = 6,
    Version = 7,
    InvalidInput = 8,
    NonFinite = 9,
    BufferTooSmall = 10,
    Panic = 99,
}

/// A loaded or generated dataset.
pub struct DcDataset(Dataset);

/// A simulation state: model, optimizer, caches and prediction log.
pub struct DcSimulation(SimulationState);

/// One prediction log row. `entity` indexes the dataset's sorted entities.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcPrediction {
    pub day: u64,
    pub entity: u64,
    pub offset: i64,
    pub predicted: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Io { .. } => DcStatus::Io,
        Error::Parse { .. } | Error::Json(_) => DcStatus::Parse,
        Error::Config(_) => DcStatus::Config,
        Error::Integrity(_) => DcStatus::Integrity,
        Error::Version { .. } => DcStatus::Version,
        Error::NonFinite(_) => DcStatus::NonFinite,
        Error::Range(_) | Error::Shape(_) | Error::Degenerate(_) => DcStatus::InvalidInput,
        Error::Benchmark { source, .. } => status_of(source),
    }
}

struct Failure(DcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> DcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(DcStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// Null or empty means "use defaults".
unsafe fn optional_json<T: Default + serde::de::DeserializeOwned>(p: *const c_char, what: &str) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = text(p, what)?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| Failure(DcStatus::Config, format!("{what}: {e}")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Outcome {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset from a generator config in JSON (null or
/// empty for defaults).
///
/// # Safety
/// `config_json` is null or a valid C string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_generate(config_json: *const c_char, out: *mut *mut DcDataset) -> DcStatus {
    guard(|| {
        let cfg: GenConfig = optional_json(config_json, "config_json")?;
        let ds = generate(&cfg)?;
        put(out, Box::into_raw(Box::new(DcDataset(ds))), "out")
    })
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` is a valid C string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_load(dir: *const c_char, out: *mut *mut DcDataset) -> DcStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        let ds = Dataset::load(&dir)?;
        put(out, Box::into_raw(Box::new(DcDataset(ds))), "out")
    })
}

/// Writes a dataset directory.
///
/// # Safety
/// `ds` is a live handle; `dir` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_save(ds: *const DcDataset, dir: *const c_char) -> DcStatus {
    guard(|| {
        let ds = borrow(ds, "ds")?;
        ds.0.save(PathBuf::from(text(dir, "dir")?).as_path())?;
        Ok(())
    })
}

/// Number of entities.
///
/// # Safety
/// `ds` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_entity_count(ds: *const DcDataset, out: *mut usize) -> DcStatus {
    guard(|| put(out, borrow(ds, "ds")?.0.entities.len(), "out"))
}

/// Number of hourly rows per entity.
///
/// # Safety
/// `ds` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_hours(ds: *const DcDataset, out: *mut usize) -> DcStatus {
    guard(|| put(out, borrow(ds, "ds")?.0.meta.hours, "out"))
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` is null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_free(ds: *mut DcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model on the offline span. `config_json` is a run config (null
/// or empty for defaults); its model, horizon and train sections are used.
///
/// # Safety
/// `ds` is a live handle; `config_json` is null or a valid C string; `out` is
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_train_offline(
    ds: *const DcDataset,
    config_json: *const c_char,
    out: *mut *mut DcSimulation,
) -> DcStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        let cfg: RunConfig = optional_json(config_json, "config_json")?;
        cfg.validate()?;
        let model = cfg.model.bind(ds, &cfg.horizon);
        let state = train_offline(ds, &model, &cfg.train, &cfg.horizon)?;
        put(out, Box::into_raw(Box::new(DcSimulation(state))), "out")
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a valid C string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_load(path: *const c_char, out: *mut *mut DcSimulation) -> DcStatus {
    guard(|| {
        let state = load_checkpoint(PathBuf::from(text(path, "path")?).as_path())?;
        put(out, Box::into_raw(Box::new(DcSimulation(state))), "out")
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `sim` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_save(sim: *const DcSimulation, path: *const c_char) -> DcStatus {
    guard(|| {
        let sim = borrow(sim, "sim")?;
        save_checkpoint(&sim.0, PathBuf::from(text(path, "path")?).as_path())?;
        Ok(())
    })
}

/// Sets the online policy: `frozen` or a `temporal:nontemporal` scheme.
///
/// # Safety
/// `sim` is a live handle; `policy` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_set_policy(sim: *mut DcSimulation, policy: *const c_char) -> DcStatus {
    guard(|| {
        let sim = borrow_mut(sim, "sim")?;
        let policy: OnlinePolicy = text(policy, "policy")?.parse()?;
        sim.0.train.scheme = policy;
        Ok(())
    })
}

/// Simulates `n_days` further days. On failure the state is left unchanged.
///
/// # Safety
/// `sim` and `ds` are live handles.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_run_days(sim: *mut DcSimulation, ds: *const DcDataset, n_days: usize) -> DcStatus {
    guard(|| {
        let sim = borrow_mut(sim, "sim")?;
        let ds = &borrow(ds, "ds")?.0;
        let mut next = sim.0.clone();
        next.run_days(ds, n_days, &mut CurveCache::new())?;
        sim.0 = next;
        Ok(())
    })
}

/// Next simulated day to be predicted.
///
/// # Safety
/// `sim` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_day(sim: *const DcSimulation, out: *mut usize) -> DcStatus {
    guard(|| put(out, borrow(sim, "sim")?.0.day, "out"))
}

/// Number of rows in the prediction log.
///
/// # Safety
/// `sim` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_prediction_count(sim: *const DcSimulation, out: *mut usize) -> DcStatus {
    guard(|| put(out, borrow(sim, "sim")?.0.log.len(), "out"))
}

/// Copies the prediction log into `buf`. With fewer than the log length in
/// `capacity` nothing is copied and `DcStatus::BufferTooSmall` is returned;
/// `written` always receives the log length.
///
/// # Safety
/// `sim` and `ds` are live handles; `buf` points to `capacity` writable rows
/// (may be null when `capacity` is 0); `written` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_predictions(
    sim: *const DcSimulation,
    ds: *const DcDataset,
    buf: *mut DcPrediction,
    capacity: usize,
    written: *mut usize,
) -> DcStatus {
    guard(|| {
        let log = &borrow(sim, "sim")?.0.log;
        let ds = &borrow(ds, "ds")?.0;
        put(written, log.len(), "written")?;
        if capacity < log.len() {
            return Err(Failure(
                DcStatus::BufferTooSmall,
                format!("buffer holds {capacity} rows, log has {}", log.len()),
            ));
        }
        if log.is_empty() {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let out = std::slice::from_raw_parts_mut(buf, log.len());
        for (slot, row) in out.iter_mut().zip(log) {
            let entity = ds
                .entities
                .iter()
                .position(|e| e.entity_id == row.entity_id)
                .ok_or_else(|| Failure(DcStatus::InvalidInput, format!("entity {} not in dataset", row.entity_id)))?;
            *slot = DcPrediction {
                day: row.day as u64,
                entity: entity as u64,
                offset: row.offset,
                predicted: row.predicted,
            };
        }
        Ok(())
    })
}

/// Writes the prediction log as CSV.
///
/// # Safety
/// `sim` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_write_log(sim: *const DcSimulation, path: *const c_char) -> DcStatus {
    guard(|| {
        let sim = borrow(sim, "sim")?;
        write_prediction_log(&sim.0.log, PathBuf::from(text(path, "path")?).as_path())?;
        Ok(())
    })
}

/// Releases a simulation. Null is ignored.
///
/// # Safety
/// `sim` is null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dc_simulation_free(sim: *mut DcSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
