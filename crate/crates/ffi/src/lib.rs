//! C interface to the simulator.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `_free` function. Every fallible call returns an
//! [`AdspStatus`], and [`adsp_last_error`] gives a message for the last
//! failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use adsp::config::ExperimentConfig;
use adsp::engine::{run, RunMetrics};
use adsp::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdspStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration could not be parsed or is inconsistent.
    Config = 3,
    /// The requested commit rate cannot be met by some worker.
    Infeasible = 4,
    /// The run itself failed.
    Run = 5,
    /// The run ended without meeting the convergence rule.
    NotConverged = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// Parsed experiment configuration.
pub struct AdspConfig(ExperimentConfig);

/// Finished run with its metrics.
pub struct AdspRun(RunMetrics);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: AdspStatus, msg: impl Into<String>) -> AdspStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> AdspStatus {
    match e {
        Error::InfeasibleRate { .. } => AdspStatus::Infeasible,
        Error::Config { .. }
        | Error::InvalidArgument { .. }
        | Error::DimensionMismatch { .. }
        | Error::Underdetermined { .. }
        | Error::Format(_) => AdspStatus::Config,
        _ => AdspStatus::Run,
    }
}

fn guard(f: impl FnOnce() -> AdspStatus) -> AdspStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(AdspStatus::Internal, "panic in adsp"))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adsp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adsp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a TOML configuration and checks that it resolves.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adsp_config_from_toml(toml: *const c_char, out: *mut *mut AdspConfig) -> AdspStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(toml).to_str() else {
            return fail(AdspStatus::InvalidUtf8, "config is not valid UTF-8");
        };
        let cfg = match ExperimentConfig::parse(text).and_then(|c| c.resolve().map(|_| c)) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        *out = Box::into_raw(Box::new(AdspConfig(cfg)));
        AdspStatus::Ok
    })
}

/// Run id the configuration gets for `seed`, as a string to release with
/// [`adsp_string_free`].
///
/// # Safety
/// `config` must come from [`adsp_config_from_toml`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_config_run_id(config: *const AdspConfig, seed: u64, out: *mut *mut c_char) -> AdspStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = into_c_string((*config).0.run_id(seed));
        AdspStatus::Ok
    })
}

/// # Safety
/// `config` must come from [`adsp_config_from_toml`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn adsp_config_free(config: *mut AdspConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the configured experiment in virtual time.
///
/// # Safety
/// `config` must come from [`adsp_config_from_toml`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_run(config: *const AdspConfig, seed: u64, out: *mut *mut AdspRun) -> AdspStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = ptr::null_mut();
        let cfg = &(*config).0;
        let result = cfg
            .resolve()
            .and_then(|r| run(&r.task, &r.cluster, &r.policy, &r.hp, &r.stop, seed));
        match result {
            Ok(mut m) => {
                m.run_id = cfg.run_id(seed);
                *out = Box::into_raw(Box::new(AdspRun(m)));
                AdspStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Virtual time at which the run met its convergence rule.
/// Returns `NotConverged` when it never did.
///
/// # Safety
/// `run` must come from [`adsp_run`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_run_convergence_time(run: *const AdspRun, out: *mut f64) -> AdspStatus {
    guard(|| {
        if run.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        match (*run).0.convergence_time {
            Some(t) => {
                *out = t;
                AdspStatus::Ok
            }
            None => fail(AdspStatus::NotConverged, "run did not converge"),
        }
    })
}

/// # Safety
/// `run` must come from [`adsp_run`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_run_final_loss(run: *const AdspRun, out: *mut f64) -> AdspStatus {
    guard(|| {
        if run.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = (*run).0.final_loss;
        AdspStatus::Ok
    })
}

/// Parameter-server updates applied during the run.
///
/// # Safety
/// `run` must come from [`adsp_run`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_run_total_steps(run: *const AdspRun, out: *mut u64) -> AdspStatus {
    guard(|| {
        if run.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = (*run).0.total_steps;
        AdspStatus::Ok
    })
}

/// Full metrics as JSON, to release with [`adsp_string_free`].
///
/// # Safety
/// `run` must come from [`adsp_run`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adsp_run_to_json(run: *const AdspRun, out: *mut *mut c_char) -> AdspStatus {
    guard(|| {
        if run.is_null() || out.is_null() {
            return fail(AdspStatus::NullArgument, "null argument");
        }
        *out = ptr::null_mut();
        match (*run).0.to_json() {
            Ok(s) => {
                *out = into_c_string(s);
                AdspStatus::Ok
            }
            Err(e) => fail(AdspStatus::Run, e.to_string()),
        }
    })
}

/// # Safety
/// `run` must come from [`adsp_run`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn adsp_run_free(run: *mut AdspRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `s` must be a string returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn adsp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn into_c_string(s: String) -> *mut c_char {
    // JSON and run ids never contain NUL
    CString::new(s).expect("no interior NUL").into_raw()
}
