//! C ABI over `infoprune`.
//!
//! Objects cross the boundary as opaque handles (`IpModel`, `IpScores`,
//! `IpPlan`) that must be released with the matching `*_free` function.
//! Every call returns an [`IpStatus`]; on failure the message is kept per
//! thread and can be fetched with [`ip_last_error_message`]. Strings handed
//! out by this library are released with [`ip_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use infoprune::refnet::{masked_equivalence, random_inputs};
use infoprune::{
    apply_plan, build_plan, count_costs, keep_count, score_model, DistanceMetric, Error, MNearest, Model, PlanOptions,
    PruningPlan, PruningRates, ScoreTable, ScoringConfig, Strategy,
};

/// Result code of every `ip_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an unparsable option string.
    InvalidArgument = 1,
    /// The archive, plan or configuration failed validation.
    Validation = 2,
    /// A file could not be read or written.
    Io = 3,
    /// Plan and archive do not belong together.
    PlanMismatch = 4,
    /// Pruned and masked-original outputs differ beyond the tolerance.
    VerifyFailed = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

pub struct IpModel(Model);
pub struct IpScores(ScoreTable);
pub struct IpPlan(PruningPlan);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> IpStatus {
    match err {
        Error::MissingFile(_) | Error::Io { .. } => IpStatus::Io,
        Error::PlanMismatch(_) => IpStatus::PlanMismatch,
        _ => IpStatus::Validation,
    }
}

struct Fail(IpStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        Fail(status_of(&e))
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    set_error(msg);
    Fail(IpStatus::InvalidArgument)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IpStatus::Ok
        }
        Ok(Err(Fail(status))) => status,
        Err(_) => {
            set_error("internal panic");
            IpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread, or NULL if the last call
/// succeeded. Release with `ip_string_free`.
#[no_mangle]
pub extern "C" fn ip_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads and validates an archive directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_model_load(path: *const c_char, out: *mut *mut IpModel) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = Model::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(IpModel(model)));
        Ok(())
    })
}

/// Writes `model` as an archive directory.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ip_model_save(model: *const IpModel, path: *const c_char) -> IpStatus {
    guard(|| {
        handle(model, "model")?.0.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_model_free(model: *mut IpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hex SHA-256 fingerprint of the archive. Release with `ip_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_model_fingerprint(model: *const IpModel, out: *mut *mut c_char) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_c_string(handle(model, "model")?.0.fingerprint());
        Ok(())
    })
}

/// Total parameters and FLOPs (1 MAC = 1 FLOP).
///
/// # Safety
/// `model` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_model_costs(model: *const IpModel, params: *mut u64, flops: *mut u64) -> IpStatus {
    guard(|| {
        let (params, flops) = (out_ptr(params, "params")?, out_ptr(flops, "flops")?);
        let report = count_costs(&handle(model, "model")?.0.manifest)?;
        *params = report.total_params;
        *flops = report.total_flops;
        Ok(())
    })
}

/// Scores every prunable layer.
///
/// `m_nearest` 0 means the exact all-pairs similarity. `metric` may be NULL
/// for euclidean.
///
/// # Safety
/// `model` must be a live handle; `metric` NULL or a NUL-terminated string;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_score(
    model: *const IpModel,
    sigma: f64,
    m_nearest: usize,
    metric: *const c_char,
    out: *mut *mut IpScores,
) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = handle(model, "model")?;
        let metric = match opt_str_arg(metric, "metric")? {
            Some(s) => s.parse::<DistanceMetric>().map_err(|e| invalid(e.to_string()))?,
            None => DistanceMetric::default(),
        };
        let config = ScoringConfig {
            sigma,
            m_nearest: if m_nearest == 0 { MNearest::Exact } else { MNearest::Nearest(m_nearest) },
            metric,
        };
        let table = score_model(&model.0, &config)?;
        *out = Box::into_raw(Box::new(IpScores(table)));
        Ok(())
    })
}

/// # Safety
/// `scores` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_to_json(scores: *const IpScores, out: *mut *mut c_char) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_c_string(handle(scores, "scores")?.0.to_json());
        Ok(())
    })
}

/// # Safety
/// `scores` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_free(scores: *mut IpScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// Builds a pruning plan.
///
/// `rates_json` uses the rates file format
/// (`{"global": p, "layers": {id: p}, "protected": [id]}`). `strategy` is
/// `least`, `most` or `random`, NULL meaning `least`.
///
/// # Safety
/// Handles must be live; strings NULL-terminated (`strategy` may be NULL);
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_plan_build(
    model: *const IpModel,
    scores: *const IpScores,
    rates_json: *const c_char,
    strategy: *const c_char,
    seed: u64,
    out: *mut *mut IpPlan,
) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (model, scores) = (handle(model, "model")?, handle(scores, "scores")?);
        let rates = PruningRates::from_json(str_arg(rates_json, "rates_json")?)?;
        let strategy = match opt_str_arg(strategy, "strategy")? {
            Some(s) => s.parse::<Strategy>().map_err(|e| invalid(e.to_string()))?,
            None => Strategy::default(),
        };
        let options = PlanOptions {
            rates,
            strategy,
            seed,
            extra_protected: vec![],
        };
        let plan = build_plan(&model.0.manifest, &scores.0, &options)?;
        *out = Box::into_raw(Box::new(IpPlan(plan)));
        Ok(())
    })
}

/// # Safety
/// `plan` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_plan_to_json(plan: *const IpPlan, out: *mut *mut c_char) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_c_string(handle(plan, "plan")?.0.to_json());
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_plan_from_json(json: *const c_char, out: *mut *mut IpPlan) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let plan = PruningPlan::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(IpPlan(plan)));
        Ok(())
    })
}

/// # Safety
/// `plan` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_plan_free(plan: *mut IpPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Applies `plan` to `model` in memory.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_apply(model: *const IpModel, plan: *const IpPlan, out: *mut *mut IpModel) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pruned = apply_plan(&handle(model, "model")?.0, &handle(plan, "plan")?.0)?;
        *out = Box::into_raw(Box::new(IpModel(pruned.model)));
        Ok(())
    })
}

/// Applies `plan` and writes the pruned archive, with provenance, to `path`.
///
/// # Safety
/// Handles must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ip_apply_and_save(model: *const IpModel, plan: *const IpPlan, path: *const c_char) -> IpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let pruned = apply_plan(&handle(model, "model")?.0, &handle(plan, "plan")?.0)?;
        pruned.save(path)?;
        Ok(())
    })
}

/// Compares `pruned` against `original` with the plan's channels masked on
/// `inputs` seeded random inputs. Writes the largest absolute deviation to
/// `max_dev` and returns `VerifyFailed` when it exceeds `tolerance`.
///
/// # Safety
/// Handles must be live; `max_dev` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_verify(
    original: *const IpModel,
    plan: *const IpPlan,
    pruned: *const IpModel,
    inputs: usize,
    seed: u64,
    tolerance: f64,
    max_dev: *mut f64,
) -> IpStatus {
    let mut failed = false;
    let status = guard(|| {
        let max_dev = out_ptr(max_dev, "max_dev")?;
        let original = &handle(original, "original")?.0;
        let xs = random_inputs(&original.manifest, inputs, seed);
        let dev = masked_equivalence(original, &handle(plan, "plan")?.0, &handle(pruned, "pruned")?.0, &xs)?;
        *max_dev = dev;
        failed = dev.is_nan() || dev > tolerance;
        Ok(())
    });
    if status == IpStatus::Ok && failed {
        set_error(format!("deviation exceeds tolerance {tolerance:e}"));
        return IpStatus::VerifyFailed;
    }
    status
}

/// Filters kept out of `n` at pruning rate `rate`, i.e. ⌈(1 − rate)·n⌉.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_keep_count(rate: f64, n: usize, out: *mut usize) -> IpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = keep_count(rate, n)?;
        Ok(())
    })
}
