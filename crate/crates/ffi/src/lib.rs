//! C ABI over the scenario runner and the solvers.
//!
//! Every function returns an [`MfbsdeStatus`]; on failure the message is
//! available from [`mfbsde_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. No Rust panic
//! crosses the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mfbsde::linear::{q_special_solve, solve_linear, LinearOptions};
use mfbsde::paths::{build_grid, simulate_ensemble};
use mfbsde::picard::{picard_full_freeze, picard_mean_freeze, Scheme};
use mfbsde::scenario::{build_driver, error_exit_code, parse_config, run, Mode, RunStatus, ScenarioConfig};
use mfbsde::utility::{adjoint_state, evaluate_j};
use mfbsde::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfbsdeStatus {
    Ok = 0,
    Internal = 1,
    Validation = 2,
    NonConvergence = 3,
    Hypothesis = 4,
    InvalidArgument = 5,
}

/// A parsed and validated scenario.
pub struct MfbsdeScenario {
    text: String,
    config: ScenarioConfig,
}

/// Outcome of a run written to disk.
pub struct MfbsdeRun {
    status: RunStatus,
    run_id: CString,
    files: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> MfbsdeStatus {
    match error_exit_code(e) {
        2 => MfbsdeStatus::Validation,
        3 => MfbsdeStatus::NonConvergence,
        4 => MfbsdeStatus::Hypothesis,
        _ => MfbsdeStatus::Internal,
    }
}

fn fail(e: Error) -> MfbsdeStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn guard(f: impl FnOnce() -> MfbsdeStatus) -> MfbsdeStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            MfbsdeStatus::Internal
        }
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string valid for reads.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, MfbsdeStatus> {
    if s.is_null() {
        set_error(format!("{what} is null"));
        return Err(MfbsdeStatus::InvalidArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MfbsdeStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfbsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn mfbsde_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a scenario document. On a validation failure the message lists
/// every offending key.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_scenario_parse(text: *const c_char, out: *mut *mut MfbsdeScenario) -> MfbsdeStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return MfbsdeStatus::InvalidArgument;
        }
        *out = ptr::null_mut();
        let text = match read_str(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_config(text) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(MfbsdeScenario { text: text.to_string(), config }));
                MfbsdeStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                MfbsdeStatus::Validation
            }
        }
    })
}

/// Releases a scenario; null is ignored.
///
/// # Safety
/// `h` must be null or a handle from [`mfbsde_scenario_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_scenario_free(h: *mut MfbsdeScenario) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be null or a live scenario handle.
unsafe fn scenario<'a>(h: *mut MfbsdeScenario) -> Result<&'a mut MfbsdeScenario, MfbsdeStatus> {
    h.as_mut().ok_or_else(|| {
        set_error("scenario handle is null");
        MfbsdeStatus::InvalidArgument
    })
}

/// Overrides the seed.
///
/// # Safety
/// `h` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_scenario_set_seed(h: *mut MfbsdeScenario, seed: u64) -> MfbsdeStatus {
    guard(|| match scenario(h) {
        Ok(s) => {
            s.config.seed = seed;
            MfbsdeStatus::Ok
        }
        Err(e) => e,
    })
}

/// Overrides the number of paths (at least 1).
///
/// # Safety
/// `h` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_scenario_set_paths(h: *mut MfbsdeScenario, n_paths: usize) -> MfbsdeStatus {
    guard(|| match scenario(h) {
        Ok(_) if n_paths == 0 => {
            set_error("n_paths must be at least 1");
            MfbsdeStatus::InvalidArgument
        }
        Ok(s) => {
            s.config.n_paths = n_paths;
            MfbsdeStatus::Ok
        }
        Err(e) => e,
    })
}

fn value_of(cfg: &ScenarioConfig) -> Result<(f64, f64), Error> {
    let grid = build_grid(cfg.horizon, cfg.steps)?;
    let ens = simulate_ensemble(&grid, &cfg.levy, cfg.n_paths, cfg.seed)?;
    match cfg.mode {
        Mode::Picard => {
            let driver = build_driver(&cfg.driver, cfg)?;
            let (_, rep) = match cfg.scheme {
                Scheme::FullFreeze => picard_full_freeze(driver.as_ref(), cfg.mean, &cfg.terminal, &ens, &cfg.solver)?,
                Scheme::MeanFreeze => picard_mean_freeze(driver.as_ref(), &cfg.terminal, &ens, &cfg.solver)?,
            };
            if !rep.converged {
                let last = rep.deltas.last().copied().unwrap_or(f64::NAN);
                return Err(Error::NonConvergence { iterations: rep.deltas.len(), last_delta: last });
            }
            Ok((rep.y0, rep.y0_se))
        }
        Mode::Linear => {
            let opts = LinearOptions { form: cfg.form, direct: false, ..Default::default() };
            let sol = solve_linear(&cfg.linear, &ens, None, &opts)?;
            Ok((sol.closed.y0, sol.closed.y0_se))
        }
        Mode::QCheck => {
            let rep = q_special_solve(&cfg.linear, &ens, None)?;
            Ok((rep.y0_weighted.value, rep.y0_weighted.se))
        }
        Mode::Utility => {
            let spec = cfg.utility.as_ref().ok_or_else(|| Error::Config("missing utility section".into()))?;
            let adj = adjoint_state(&spec.coeffs, &ens, &cfg.solver.basis)?;
            let j = evaluate_j(&spec.wealth, &spec.coeffs, &adj.pi_hat, &ens, spec.route)?;
            Ok((j.value, j.se))
        }
        Mode::Compare => Err(Error::Capability("compare scenarios have two values; use mfbsde_run".into())),
    }
}

/// Solves the scenario in memory and returns `Y(0)` (the utility of the
/// candidate control in utility mode) with its standard error.
///
/// # Safety
/// `h` must be a live scenario handle; `y0` and `se` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_scenario_solve(h: *mut MfbsdeScenario, y0: *mut f64, se: *mut f64) -> MfbsdeStatus {
    guard(|| {
        let s = match scenario(h) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if y0.is_null() || se.is_null() {
            set_error("output pointer is null");
            return MfbsdeStatus::InvalidArgument;
        }
        match value_of(&s.config) {
            Ok((v, e)) => {
                *y0 = v;
                *se = e;
                MfbsdeStatus::Ok
            }
            Err(e @ Error::Capability(_)) => {
                set_error(e.to_string());
                MfbsdeStatus::InvalidArgument
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs the scenario and writes CSV files and the manifest into `out_dir`.
/// A run that completes but does not converge or fails a comparison
/// hypothesis still yields a handle, and the matching status is returned.
///
/// # Safety
/// `h` must be a live scenario handle, `out_dir` a NUL-terminated path and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_run(h: *mut MfbsdeScenario, out_dir: *const c_char, out: *mut *mut MfbsdeRun) -> MfbsdeStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return MfbsdeStatus::InvalidArgument;
        }
        *out = ptr::null_mut();
        let s = match scenario(h) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let dir = match read_str(out_dir, "out_dir") {
            Ok(d) => d,
            Err(e) => return e,
        };
        match run(&s.config, &s.text, Path::new(dir)) {
            Ok(o) => {
                let status = match o.status {
                    RunStatus::Success => MfbsdeStatus::Ok,
                    RunStatus::NonConvergence => MfbsdeStatus::NonConvergence,
                    RunStatus::HypothesisFailure => MfbsdeStatus::Hypothesis,
                };
                if status != MfbsdeStatus::Ok {
                    set_error(o.summary.join("; "));
                }
                *out = Box::into_raw(Box::new(MfbsdeRun {
                    status: o.status,
                    run_id: CString::new(o.run_id).unwrap_or_default(),
                    files: o.files.len(),
                }));
                status
            }
            Err(e) => fail(e),
        }
    })
}

/// Process exit code of the run: 0, 3 or 4. Returns -1 for a null handle.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_run_exit_code(r: *const MfbsdeRun) -> i32 {
    r.as_ref().map_or(-1, |r| r.status.exit_code())
}

/// SHA-256 run identifier (64 hex characters), valid while the handle lives.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_run_id(r: *const MfbsdeRun) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.run_id.as_ptr())
}

/// Number of CSV files written, excluding the manifest.
///
/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_run_file_count(r: *const MfbsdeRun) -> usize {
    r.as_ref().map_or(0, |r| r.files)
}

/// Releases a run handle; null is ignored.
///
/// # Safety
/// `r` must be null or a handle from [`mfbsde_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mfbsde_run_free(r: *mut MfbsdeRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
