//! C interface. Every function returns a [`FedepaStatus`]; on failure the
//! message is kept per thread and read back with [`fedepa_last_error`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedepa::config::ExperimentFile;
use fedepa::federation::RunReport;
use fedepa::metrics::{ConfusionMatrix, Metrics};
use fedepa::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedepaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FedepaMetrics {
    pub oa: f64,
    pub ba: f64,
    pub f1: f64,
}

impl From<Metrics> for FedepaMetrics {
    fn from(m: Metrics) -> Self {
        Self {
            oa: m.oa,
            ba: m.ba,
            f1: m.f1,
        }
    }
}

/// An experiment description: a base TOML document plus overrides.
pub struct FedepaExperiment {
    base: String,
    overrides: Vec<String>,
    file: ExperimentFile,
}

/// The result of one training run.
pub struct FedepaReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> FedepaStatus {
    match e.exit_code() {
        2 => FedepaStatus::Config,
        3 => FedepaStatus::Numeric,
        _ => FedepaStatus::Io,
    }
}

struct Failure(FedepaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> FedepaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FedepaStatus::Ok
        }
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
            FedepaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(FedepaStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FedepaStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FedepaStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedepa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// without the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fedepa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses an experiment TOML document (`[run]`, `[data]`, `[sweep]`).
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_experiment_from_toml(
    toml: *const c_char,
    out: *mut *mut FedepaExperiment,
) -> FedepaStatus {
    guard(|| {
        non_null(out, "out")?;
        let base = str_arg(toml, "toml")?.to_string();
        let file = ExperimentFile::parse(&base, &[], None)?;
        *out = Box::into_raw(Box::new(FedepaExperiment {
            base,
            overrides: Vec::new(),
            file,
        }));
        Ok(())
    })
}

/// The built-in benchmark preset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_experiment_benchmark(out: *mut *mut FedepaExperiment) -> FedepaStatus {
    fedepa_experiment_from_toml(
        CString::new(fedepa::config::BENCHMARK_TOML)
            .expect("preset has no NUL")
            .as_ptr(),
        out,
    )
}

/// Applies a `key=value` override. The experiment is unchanged on error.
///
/// # Safety
/// `exp` must come from this library; `key_value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedepa_experiment_set(
    exp: *mut FedepaExperiment,
    key_value: *const c_char,
) -> FedepaStatus {
    guard(|| {
        non_null(exp, "exp")?;
        let exp = &mut *exp;
        let mut overrides = exp.overrides.clone();
        overrides.push(str_arg(key_value, "key_value")?.to_string());
        exp.file = ExperimentFile::parse(&exp.base, &overrides, None)?;
        exp.overrides = overrides;
        Ok(())
    })
}

/// Trains the experiment (ignoring any sweep axes).
///
/// # Safety
/// `exp` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_experiment_run(
    exp: *const FedepaExperiment,
    out: *mut *mut FedepaReport,
) -> FedepaStatus {
    guard(|| {
        non_null(exp, "exp")?;
        non_null(out, "out")?;
        let outcome = (*exp).file.experiment().execute()?;
        *out = Box::into_raw(Box::new(FedepaReport {
            report: outcome.report,
        }));
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn fedepa_experiment_free(exp: *mut FedepaExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Mean final-round metrics over clients.
///
/// # Safety
/// `report` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_report_metrics(
    report: *const FedepaReport,
    out: *mut FedepaMetrics,
) -> FedepaStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = (*report).report.final_metrics().into();
        Ok(())
    })
}

/// Number of completed rounds.
///
/// # Safety
/// `report` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_report_rounds(report: *const FedepaReport, out: *mut usize) -> FedepaStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = (*report).report.body.rounds.len();
        Ok(())
    })
}

/// The report as JSON. Release the string with [`fedepa_string_free`].
/// With `include_timing = false` the output is identical across repeated
/// runs of one seed.
///
/// # Safety
/// `report` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_report_json(
    report: *const FedepaReport,
    include_timing: bool,
    out: *mut *mut c_char,
) -> FedepaStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        let r = &(*report).report;
        let json = if include_timing { r.to_json()? } else { r.body_json()? };
        *out = CString::new(json)
            .map_err(|e| Failure(FedepaStatus::Io, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn fedepa_report_free(report: *mut FedepaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn fedepa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// OA, BA and macro F1 of a row-major `classes x classes` confusion matrix
/// (rows are true classes).
///
/// # Safety
/// `counts` must point to `classes * classes` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_metrics_from_confusion(
    counts: *const u64,
    classes: usize,
    out: *mut FedepaMetrics,
) -> FedepaStatus {
    guard(|| {
        non_null(counts, "counts")?;
        non_null(out, "out")?;
        let n = classes
            .checked_mul(classes)
            .ok_or_else(|| Failure(FedepaStatus::Config, "class count overflows".into()))?;
        let flat = std::slice::from_raw_parts(counts, n);
        let rows: Vec<Vec<u64>> = flat.chunks(classes.max(1)).map(<[u64]>::to_vec).collect();
        let cm = ConfusionMatrix::from_rows(&rows)?;
        *out = Metrics::from_confusion(&cm)?.into();
        Ok(())
    })
}

/// Runs the built-in checks; `passed` receives how many succeeded and
/// `total` how many ran. Returns `Numeric` if any failed.
///
/// # Safety
/// `passed` and `total` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedepa_selftest(passed: *mut usize, total: *mut usize) -> FedepaStatus {
    guard(|| {
        non_null(passed, "passed")?;
        non_null(total, "total")?;
        let results = fedepa::selftest::run_selftest();
        *passed = results.iter().filter(|r| r.passed).count();
        *total = results.len();
        match results.iter().find(|r| !r.passed) {
            Some(r) => Err(Failure(FedepaStatus::Numeric, format!("{}: {}", r.name, r.detail))),
            None => Ok(()),
        }
    })
}
