//! C ABI over the taskgen core.
//!
//! Every fallible function returns a [`TgStatus`]; on anything other than
//! `TG_STATUS_OK` a description is available from [`tg_last_error_message`]
//! on the same thread. Strings handed out by this library are owned by the
//! caller and released with [`tg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use taskgen::assessment;
use taskgen::domain::{self, ExecutionOutcome, GenerationRequest};
use taskgen::pipeline;
use taskgen::sandbox::{self, Sandbox, SandboxConfig, SandboxError, SandboxLimits};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    /// The interpreter or a working directory could not be set up.
    SandboxSetup = 4,
    Panic = 5,
}

/// Opaque sandbox handle.
pub struct TgSandbox {
    inner: Sandbox,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TgAgreement {
    pub n: usize,
    pub pa: f64,
    pub pi_hat: f64,
    pub pe: f64,
    pub ac1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TgLikert {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; meaningful only when `has_sd` is set.
    pub sd: f64,
    pub has_sd: bool,
    /// Counts of the levels 1 through 5.
    pub histogram: [u64; 5],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TgStatus, String);

impl From<SandboxError> for Failure {
    fn from(e: SandboxError) -> Self {
        let status = match e {
            SandboxError::SetupFailure(_) => TgStatus::SandboxSetup,
            _ => TgStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure(TgStatus::InvalidInput, e.to_string())
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TgStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TgStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TgStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(TgStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(TgStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(TgStatus::NullArgument, "output pointer is null".into()));
    }
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| invalid("result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a sandbox running `interpreter` (null means `python3`) with at
/// most `max_concurrent` children at once (0 means 1).
///
/// # Safety
/// `interpreter` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_sandbox_new(
    interpreter: *const c_char,
    max_concurrent: u32,
    out: *mut *mut TgSandbox,
) -> TgStatus {
    guard(|| {
        check_out(out)?;
        let mut config = SandboxConfig { max_concurrent: max_concurrent.max(1) as usize, ..SandboxConfig::default() };
        if !interpreter.is_null() {
            config.interpreter = read_str(interpreter, "interpreter")?.to_string();
        }
        if sandbox::find_interpreter(&config.interpreter).is_none() {
            return Err(Failure(TgStatus::SandboxSetup, format!("interpreter {} not found", config.interpreter)));
        }
        *out = Box::into_raw(Box::new(TgSandbox { inner: Sandbox::new(config) }));
        Ok(())
    })
}

/// Runs `solution` against `tests` and writes the outcome as a JSON object
/// to `out_json`. Zero limits select the defaults.
///
/// # Safety
/// `sandbox` comes from [`tg_sandbox_new`]; strings are NUL-terminated;
/// `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_sandbox_run(
    sandbox: *const TgSandbox,
    solution: *const c_char,
    tests: *const c_char,
    wall_timeout_ms: u64,
    max_output_bytes: usize,
    out_json: *mut *mut c_char,
) -> TgStatus {
    guard(|| {
        check_out(out_json)?;
        let sandbox = sandbox.as_ref().ok_or(Failure(TgStatus::NullArgument, "sandbox is null".into()))?;
        let solution = read_str(solution, "solution")?;
        let tests = read_str(tests, "tests")?;
        let mut limits = SandboxLimits::default();
        if wall_timeout_ms > 0 {
            limits.wall_timeout_ms = wall_timeout_ms;
        }
        if max_output_bytes > 0 {
            limits.max_output_bytes = max_output_bytes;
        }
        let outcome = sandbox.inner.run_solution_against_tests(solution, tests, &limits)?;
        write_string(out_json, serde_json::to_string(&outcome).map_err(invalid)?)
    })
}

/// # Safety
/// `sandbox` is null or comes from [`tg_sandbox_new`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn tg_sandbox_free(sandbox: *mut TgSandbox) {
    if !sandbox.is_null() {
        drop(Box::from_raw(sandbox));
    }
}

/// Strips Markdown code fences from model output.
///
/// # Safety
/// `text` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_sanitize_source(text: *const c_char, out: *mut *mut c_char) -> TgStatus {
    guard(|| {
        check_out(out)?;
        write_string(out, sandbox::sanitize_source(read_str(text, "text")?))
    })
}

/// Gwet's AC1 for two raters over `n` binary judgements.
///
/// # Safety
/// `a` and `b` point to `n` values each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_gwet_ac1(a: *const bool, b: *const bool, n: usize, out: *mut TgAgreement) -> TgStatus {
    guard(|| {
        check_out(out)?;
        let a = slice(a, n, "a")?;
        let b = slice(b, n, "b")?;
        let pairs: Vec<(bool, bool)> = a.iter().copied().zip(b.iter().copied()).collect();
        let s = assessment::gwet_ac1(&pairs).map_err(invalid)?;
        *out = TgAgreement { n: s.n, pa: s.pa, pi_hat: s.pi_hat, pe: s.pe, ac1: s.ac1 };
        Ok(())
    })
}

/// Mean, sample standard deviation and histogram of 1..=5 ratings.
///
/// # Safety
/// `values` points to `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_likert_summary(values: *const u8, n: usize, out: *mut TgLikert) -> TgStatus {
    guard(|| {
        check_out(out)?;
        let s = assessment::likert_summary(slice(values, n, "values")?).map_err(invalid)?;
        *out = TgLikert {
            n: s.n,
            mean: s.mean,
            sd: s.sd.unwrap_or(f64::NAN),
            has_sd: s.sd.is_some(),
            histogram: s.histogram,
        };
        Ok(())
    })
}

/// Whether an execution outcome, given as JSON, counts as functional.
///
/// # Safety
/// `outcome_json` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_evaluate_e1(outcome_json: *const c_char, out: *mut bool) -> TgStatus {
    guard(|| {
        check_out(out)?;
        let outcome: ExecutionOutcome =
            serde_json::from_str(read_str(outcome_json, "outcome_json")?).map_err(invalid)?;
        *out = pipeline::evaluate_e1(&outcome);
        Ok(())
    })
}

/// Trims, deduplicates and bounds a generation request given as JSON.
///
/// # Safety
/// `request_json` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn tg_normalize_request(request_json: *const c_char, out_json: *mut *mut c_char) -> TgStatus {
    guard(|| {
        check_out(out_json)?;
        let raw: GenerationRequest = serde_json::from_str(read_str(request_json, "request_json")?).map_err(invalid)?;
        let normalized = domain::normalize_request(raw);
        write_string(out_json, serde_json::to_string(&normalized).map_err(invalid)?)
    })
}
