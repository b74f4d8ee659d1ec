//! C ABI over the citadel simulator.
//!
//! Configs and job results are opaque handles. Every function returns a
//! [`CitadelStatus`]; on failure a message is available from
//! [`citadel_last_error`] on the same thread. Variable-length outputs use
//! caller-provided buffers: the required length is always written to `len`,
//! and `CITADEL_BUFFER_TOO_SMALL` is returned if `cap` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::ptr;

use citadel::config::JobConfig;
use citadel::costmodel::{estimate_mask, estimate_tree};
use citadel::simnet::{cost_params, run_job, JobResult, SimError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CitadelStatus {
    CitadelOk = 0,
    CitadelNullPointer = 1,
    CitadelInvalidUtf8 = 2,
    CitadelInvalidConfig = 3,
    CitadelUnknownTemplate = 4,
    CitadelPrivacyViolation = 5,
    CitadelAttestationFailed = 6,
    CitadelJobFailed = 7,
    CitadelBufferTooSmall = 8,
    CitadelInvalidArgument = 9,
    CitadelPanic = 10,
}

use CitadelStatus::*;

/// A validated job configuration.
pub struct CitadelConfig(JobConfig);

/// The outcome of a finished job.
pub struct CitadelJob(JobResult);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: CitadelStatus, message: impl Into<String>) -> CitadelStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> CitadelStatus) -> CitadelStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(CitadelPanic, "internal panic"),
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CitadelStatus> {
    if s.is_null() {
        return Err(fail(CitadelNullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(CitadelInvalidUtf8, e.to_string()))
}

unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, len: *mut usize) -> CitadelStatus {
    if len.is_null() {
        return fail(CitadelNullPointer, "null length pointer");
    }
    *len = bytes.len();
    if bytes.len() > cap {
        return fail(
            CitadelBufferTooSmall,
            format!("need {} bytes, buffer holds {cap}", bytes.len()),
        );
    }
    if !bytes.is_empty() {
        if buf.is_null() {
            return fail(CitadelNullPointer, "null buffer");
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    }
    CitadelOk
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> CitadelStatus {
    *out = Box::into_raw(Box::new(value));
    CitadelOk
}

/// Copies the last error message of this thread (no terminator).
///
/// # Safety
/// `buf` must hold `cap` writable bytes; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_last_error(buf: *mut u8, cap: usize, len: *mut usize) -> CitadelStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(msg.as_bytes(), buf, cap, len)
}

/// Parses and validates a TOML job config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_config_from_toml(
    toml: *const c_char,
    out: *mut *mut CitadelConfig,
) -> CitadelStatus {
    guard(|| {
        if out.is_null() {
            return fail(CitadelNullPointer, "null output handle");
        }
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match JobConfig::from_toml(text) {
            Ok(cfg) => put(out, CitadelConfig(cfg)),
            Err(e) => fail(CitadelInvalidConfig, e.to_string()),
        }
    })
}

/// Builds one of the `mask`, `tree` or `ssp` templates.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_config_template(
    name: *const c_char,
    out: *mut *mut CitadelConfig,
) -> CitadelStatus {
    guard(|| {
        if out.is_null() {
            return fail(CitadelNullPointer, "null output handle");
        }
        let name = match read_str(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match JobConfig::template(name) {
            Some(cfg) => put(out, CitadelConfig(cfg)),
            None => fail(CitadelUnknownTemplate, format!("unknown template {name:?}")),
        }
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn citadel_config_set_seed(cfg: *mut CitadelConfig, seed: u64) -> CitadelStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.0.seed = seed;
            CitadelOk
        }
        None => fail(CitadelNullPointer, "null config"),
    }
}

/// Writes the config back out as TOML.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_config_to_toml(
    cfg: *const CitadelConfig,
    buf: *mut u8,
    cap: usize,
    len: *mut usize,
) -> CitadelStatus {
    guard(|| match cfg.as_ref() {
        Some(c) => copy_out(c.0.to_toml().as_bytes(), buf, cap, len),
        None => fail(CitadelNullPointer, "null config"),
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn citadel_config_free(cfg: *mut CitadelConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Mask-mode and tree-mode iteration estimates for `n` enclaves and fan-out `c`.
///
/// # Safety
/// `cfg` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_estimate(
    cfg: *const CitadelConfig,
    n: usize,
    c: usize,
    mask: *mut u64,
    tree: *mut u64,
) -> CitadelStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(CitadelNullPointer, "null config");
        };
        if mask.is_null() || tree.is_null() {
            return fail(CitadelNullPointer, "null output");
        }
        if n == 0 || c < 2 {
            return fail(CitadelInvalidArgument, format!("need n >= 1 and c >= 2, got n={n} c={c}"));
        }
        match cost_params(&cfg.0) {
            Ok(p) => {
                *mask = estimate_mask(&p, n);
                *tree = estimate_tree(&p, n, c);
                CitadelOk
            }
            Err(e) => fail(CitadelInvalidConfig, e.to_string()),
        }
    })
}

/// Runs a whole job to completion.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_run_job(
    cfg: *const CitadelConfig,
    out: *mut *mut CitadelJob,
) -> CitadelStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(CitadelNullPointer, "null config");
        };
        if out.is_null() {
            return fail(CitadelNullPointer, "null output handle");
        }
        match run_job(&cfg.0) {
            Ok(job) => put(out, CitadelJob(job)),
            Err(e) => {
                let status = match e {
                    SimError::Config(_) => CitadelInvalidConfig,
                    SimError::PrivacyViolation { .. } => CitadelPrivacyViolation,
                    SimError::Attestation { .. } => CitadelAttestationFailed,
                    _ => CitadelJobFailed,
                };
                fail(status, e.to_string())
            }
        }
    })
}

/// # Safety
/// `job` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_accuracy(job: *const CitadelJob, out: *mut f64) -> CitadelStatus {
    match (job.as_ref(), out.is_null()) {
        (Some(j), false) => {
            *out = j.0.accuracy;
            CitadelOk
        }
        _ => fail(CitadelNullPointer, "null job or output"),
    }
}

/// Total simulated time of the job.
///
/// # Safety
/// `job` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_total_time(job: *const CitadelJob, out: *mut u64) -> CitadelStatus {
    match (job.as_ref(), out.is_null()) {
        (Some(j), false) => {
            *out = j.0.total_time;
            CitadelOk
        }
        _ => fail(CitadelNullPointer, "null job or output"),
    }
}

/// Number of committed iterations.
///
/// # Safety
/// `job` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_iterations(job: *const CitadelJob, out: *mut u64) -> CitadelStatus {
    match (job.as_ref(), out.is_null()) {
        (Some(j), false) => {
            *out = j.0.spans.len() as u64;
            CitadelOk
        }
        _ => fail(CitadelNullPointer, "null job or output"),
    }
}

/// The metrics CSV (no terminator).
///
/// # Safety
/// `job` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_metrics_csv(
    job: *const CitadelJob,
    buf: *mut u8,
    cap: usize,
    len: *mut usize,
) -> CitadelStatus {
    guard(|| match job.as_ref() {
        Some(j) => copy_out(j.0.metrics_csv().as_bytes(), buf, cap, len),
        None => fail(CitadelNullPointer, "null job"),
    })
}

/// The final encrypted model blob as stored.
///
/// # Safety
/// `job` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_model_blob(
    job: *const CitadelJob,
    buf: *mut u8,
    cap: usize,
    len: *mut usize,
) -> CitadelStatus {
    guard(|| match job.as_ref() {
        Some(j) => copy_out(&j.0.final_model_blob, buf, cap, len),
        None => fail(CitadelNullPointer, "null job"),
    })
}

/// # Safety
/// `job` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn citadel_job_free(job: *mut CitadelJob) {
    if !job.is_null() {
        drop(Box::from_raw(job));
    }
}
