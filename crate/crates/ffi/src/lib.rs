//! C ABI over the `infovla` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_from_*`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`InfovlaStatus`]; on failure the message is available from
//! [`infovla_last_error`] on the same thread until the next failing call.
//! Strings returned through `char**` out-parameters are owned by the caller
//! and must be released with [`infovla_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use infovla::config::{ExperimentConfig, Preset};
use infovla::experiment::run_experiment;
use infovla::gradsuite::run_suite;
use infovla::metrics::{aa_from_stage_averages, Metrics, SuccessMatrix};
use infovla::trainer::Strategy;
use infovla::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfovlaStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument value or non-UTF-8 string.
    InvalidArgument = 2,
    /// Config failed validation.
    Config = 3,
    /// Malformed input file or text.
    Format = 4,
    /// Non-finite value during training or evaluation.
    Numerical = 5,
    Io = 6,
    /// Requested cell is undefined in the success matrix.
    Undefined = 7,
    /// Internal contract or shape violation.
    Internal = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfovlaStrategy {
    Multitask = 0,
    Sequential = 1,
    Er = 2,
    Ewc = 3,
    Infovla = 4,
}

impl From<InfovlaStrategy> for Strategy {
    fn from(s: InfovlaStrategy) -> Self {
        match s {
            InfovlaStrategy::Multitask => Strategy::Multitask,
            InfovlaStrategy::Sequential => Strategy::Sequential,
            InfovlaStrategy::Er => Strategy::Er,
            InfovlaStrategy::Ewc => Strategy::Ewc,
            InfovlaStrategy::Infovla => Strategy::Infovla,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfovlaPreset {
    Ci = 0,
    Long = 1,
}

/// Scalar continual-learning metrics, as fractions in [0, 1].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InfovlaMetrics {
    pub auc: f64,
    pub fwt: f64,
    pub nbt: f64,
    pub faa: f64,
    pub aa: f64,
}

impl From<&Metrics> for InfovlaMetrics {
    fn from(m: &Metrics) -> Self {
        Self {
            auc: m.auc,
            fwt: m.fwt,
            nbt: m.nbt,
            faa: m.faa,
            aa: m.aa,
        }
    }
}

/// Opaque success matrix.
pub struct InfovlaMatrix(SuccessMatrix);

/// Opaque experiment config.
pub struct InfovlaConfig(ExperimentConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(InfovlaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => InfovlaStatus::Config,
            Error::Format(_) | Error::Json(_) => InfovlaStatus::Format,
            Error::Numerical { .. } | Error::NonFinite(_) => InfovlaStatus::Numerical,
            Error::Io(_) => InfovlaStatus::Io,
            Error::Domain(_) => InfovlaStatus::InvalidArgument,
            _ => InfovlaStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: InfovlaStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f` behind the panic barrier and records failures.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InfovlaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InfovlaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            InfovlaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(InfovlaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(InfovlaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(InfovlaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(InfovlaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(InfovlaStatus::NullPointer, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| fail(InfovlaStatus::Internal, "string contains NUL"))?;
    put(out, c.into_raw())
}

/// Message of the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn infovla_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn infovla_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn infovla_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a matrix from row-major `values` of `tasks × stages` cells;
/// `defined[i]` nonzero marks cell `i` as defined.
///
/// # Safety
/// `values` and `defined` must point to `tasks * stages` elements; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_new(
    tasks: usize,
    stages: usize,
    values: *const f64,
    defined: *const u8,
    out: *mut *mut InfovlaMatrix,
) -> InfovlaStatus {
    guard(|| {
        if values.is_null() || defined.is_null() {
            return Err(fail(InfovlaStatus::NullPointer, "values or defined is null"));
        }
        let n = tasks
            .checked_mul(stages)
            .ok_or_else(|| fail(InfovlaStatus::InvalidArgument, "matrix size overflows"))?;
        let (v, d) = (std::slice::from_raw_parts(values, n), std::slice::from_raw_parts(defined, n));
        let cells = (0..tasks)
            .map(|i| (0..stages).map(|j| (d[i * stages + j] != 0).then_some(v[i * stages + j])).collect())
            .collect();
        let m = SuccessMatrix::new(cells)?;
        put(out, Box::into_raw(Box::new(InfovlaMatrix(m))))
    })
}

/// Parses R.csv text.
///
/// # Safety
/// `csv` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_from_csv(csv: *const c_char, out: *mut *mut InfovlaMatrix) -> InfovlaStatus {
    guard(|| {
        let m = SuccessMatrix::from_csv(str_arg(csv, "csv")?)?;
        put(out, Box::into_raw(Box::new(InfovlaMatrix(m))))
    })
}

/// Reads an R.csv file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_read(path: *const c_char, out: *mut *mut InfovlaMatrix) -> InfovlaStatus {
    guard(|| {
        let m = SuccessMatrix::read_csv(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(InfovlaMatrix(m))))
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_free(m: *mut InfovlaMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `tasks` and `stages` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_shape(
    m: *const InfovlaMatrix,
    tasks: *mut usize,
    stages: *mut usize,
) -> InfovlaStatus {
    guard(|| {
        let m = &ref_arg(m, "matrix")?.0;
        put(tasks, m.tasks())?;
        put(stages, m.stages())
    })
}

/// Cell `(task, stage)`; returns `Undefined` for cells before the task's
/// first stage.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_get(
    m: *const InfovlaMatrix,
    task: usize,
    stage: usize,
    out: *mut f64,
) -> InfovlaStatus {
    guard(|| {
        let m = &ref_arg(m, "matrix")?.0;
        if task >= m.tasks() || stage >= m.stages() {
            return Err(fail(InfovlaStatus::InvalidArgument, format!("cell ({task}, {stage}) out of range")));
        }
        match m.get(task, stage) {
            Some(v) => put(out, v),
            None => Err(fail(InfovlaStatus::Undefined, format!("cell ({task}, {stage}) is undefined"))),
        }
    })
}

/// R.csv text of the matrix; free with [`infovla_string_free`].
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_to_csv(m: *const InfovlaMatrix, out: *mut *mut c_char) -> InfovlaStatus {
    guard(|| put_string(out, ref_arg(m, "matrix")?.0.to_csv()))
}

/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_matrix_metrics(m: *const InfovlaMatrix, out: *mut InfovlaMetrics) -> InfovlaStatus {
    guard(|| put(out, InfovlaMetrics::from(&Metrics::compute(&ref_arg(m, "matrix")?.0))))
}

/// Average accuracy from per-stage "All" averages.
///
/// # Safety
/// `averages` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_aa_from_stage_averages(averages: *const f64, n: usize, out: *mut f64) -> InfovlaStatus {
    guard(|| {
        if averages.is_null() {
            return Err(fail(InfovlaStatus::NullPointer, "averages is null"));
        }
        if n == 0 {
            return Err(fail(InfovlaStatus::InvalidArgument, "no stage averages"));
        }
        put(out, aa_from_stage_averages(std::slice::from_raw_parts(averages, n)))
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_preset(preset: InfovlaPreset, out: *mut *mut InfovlaConfig) -> InfovlaStatus {
    guard(|| {
        let p = match preset {
            InfovlaPreset::Ci => Preset::Ci,
            InfovlaPreset::Long => Preset::Long,
        };
        put(out, Box::into_raw(Box::new(InfovlaConfig(ExperimentConfig::preset(p)))))
    })
}

/// Parses and validates a JSON config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_from_json(json: *const c_char, out: *mut *mut InfovlaConfig) -> InfovlaStatus {
    guard(|| {
        let c = ExperimentConfig::from_json(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(InfovlaConfig(c))))
    })
}

/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_to_json(c: *const InfovlaConfig, out: *mut *mut c_char) -> InfovlaStatus {
    guard(|| {
        let text = serde_json::to_string_pretty(&ref_arg(c, "config")?.0).map_err(Error::from)?;
        put_string(out, text)
    })
}

/// # Safety
/// `c` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_set_strategy(c: *mut InfovlaConfig, strategy: InfovlaStrategy) -> InfovlaStatus {
    guard(|| {
        mut_arg(c, "config")?.0.strategy = strategy.into();
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle; `seeds` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_set_seeds(c: *mut InfovlaConfig, seeds: *const u64, n: usize) -> InfovlaStatus {
    guard(|| {
        let c = mut_arg(c, "config")?;
        if seeds.is_null() {
            return Err(fail(InfovlaStatus::NullPointer, "seeds is null"));
        }
        c.0.seeds = std::slice::from_raw_parts(seeds, n).to_vec();
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_set_output_dir(c: *mut InfovlaConfig, dir: *const c_char) -> InfovlaStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        mut_arg(c, "config")?.0.output_dir = dir;
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_set_iterations(
    c: *mut InfovlaConfig,
    base: usize,
    incremental: usize,
) -> InfovlaStatus {
    guard(|| {
        let train = &mut mut_arg(c, "config")?.0.train;
        train.iterations_base = base;
        train.iterations_incremental = incremental;
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_validate(c: *const InfovlaConfig) -> InfovlaStatus {
    guard(|| Ok(ref_arg(c, "config")?.0.validate()?))
}

/// # Safety
/// `c` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn infovla_config_free(c: *mut InfovlaConfig) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Runs every seed of the configured strategy into the output directory and
/// writes the seed-mean metrics to `mean`. Blocks until done.
///
/// # Safety
/// `c` must be a live handle; `mean` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_run(c: *const InfovlaConfig, mean: *mut InfovlaMetrics) -> InfovlaStatus {
    guard(|| {
        let agg = run_experiment(&ref_arg(c, "config")?.0, false, &mut ())?;
        put(
            mean,
            InfovlaMetrics {
                auc: agg.auc.mean,
                fwt: agg.fwt.mean,
                nbt: agg.nbt.mean,
                faa: agg.faa.mean,
                aa: agg.aa.mean,
            },
        )
    })
}

/// Runs the finite-difference gradient suite; `all_passed` receives 1 when
/// every case is within tolerance.
///
/// # Safety
/// `all_passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infovla_gradcheck(instances: usize, seed: u64, all_passed: *mut i32) -> InfovlaStatus {
    guard(|| {
        let reports = run_suite(instances, seed, None)?;
        put(all_passed, i32::from(reports.iter().all(|r| r.passed)))
    })
}
