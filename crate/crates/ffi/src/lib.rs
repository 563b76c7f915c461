//! C ABI over `hsr-core`.
//!
//! Every fallible function returns an [`HsrStatus`] and writes its result
//! through an out-pointer. On failure a message is kept per thread and can be
//! fetched with [`hsr_last_error`]. Strings returned to the caller are owned
//! by the caller and must be released with [`hsr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hsr_core::ensemble::nb_ensemble_prob;
use hsr_core::experiment::{run_experiment, ExperimentConfig, ExperimentReport, Strategy};
use hsr_core::metrics::compute_price_ratio;
use hsr_core::prob::{
    bayes_filter_update, beta_prob_better_than_random, item_out_prob, skew_accuracy, BetaPosterior, LossParams,
    VoteLabel,
};
use hsr_core::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Runtime = 5,
    NotFound = 6,
    Panic = 7,
}

/// Vote or classifier label.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsrLabel {
    In = 0,
    Out = 1,
}

impl From<HsrLabel> for VoteLabel {
    fn from(l: HsrLabel) -> Self {
        match l {
            HsrLabel::In => VoteLabel::In,
            HsrLabel::Out => VoteLabel::Out,
        }
    }
}

/// Opaque experiment handle: a validated configuration plus the report of its
/// last run.
pub struct HsrExperiment {
    config: ExperimentConfig,
    report: Option<ExperimentReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: HsrStatus, msg: impl Into<String>) -> HsrStatus {
    set_error(msg);
    status
}

fn core_status(e: &Error) -> HsrStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Parse { .. } => HsrStatus::Config,
        Error::Domain { .. } | Error::Empty(_) | Error::Coverage(_) | Error::DegenerateEvidence(_) => {
            HsrStatus::InvalidArgument
        }
        _ => HsrStatus::Runtime,
    }
}

fn from_core(e: Error) -> HsrStatus {
    fail(core_status(&e), e.to_string())
}

/// Runs `f`, turning panics into `HsrStatus::Panic` and clearing the last
/// error on success.
fn guard(f: impl FnOnce() -> HsrStatus) -> HsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(HsrStatus::Ok) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HsrStatus::Ok
        }
        Ok(s) => s,
        Err(_) => fail(HsrStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, HsrStatus> {
    if p.is_null() {
        return Err(fail(HsrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HsrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> HsrStatus {
    if out.is_null() {
        return fail(HsrStatus::NullPointer, "output pointer is null");
    }
    out.write(value);
    HsrStatus::Ok
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn hsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or null if the last call
/// succeeded. Free with `hsr_string_free`.
#[no_mangle]
pub extern "C" fn hsr_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hsr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Worker accuracy on a filter of the given difficulty.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_skew_accuracy(base_accuracy: f64, difficulty: f64, out: *mut f64) -> HsrStatus {
    guard(|| match skew_accuracy(base_accuracy, difficulty) {
        Ok(v) => write_out(out, v),
        Err(e) => from_core(e),
    })
}

/// Posterior P(filter does not apply) after one vote.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_bayes_filter_update(
    prior_in: f64,
    worker_accuracy: f64,
    vote: HsrLabel,
    out: *mut f64,
) -> HsrStatus {
    guard(|| match bayes_filter_update(prior_in, worker_accuracy, vote.into()) {
        Ok(v) => write_out(out, v),
        Err(e) => from_core(e),
    })
}

/// Probability that an item is screened out from its per-filter IN
/// probabilities.
///
/// # Safety
/// `in_probs` must point to `n` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_item_out_prob(in_probs: *const f64, n: usize, out: *mut f64) -> HsrStatus {
    guard(|| {
        if in_probs.is_null() {
            return fail(HsrStatus::NullPointer, "in_probs is null");
        }
        match item_out_prob(std::slice::from_raw_parts(in_probs, n)) {
            Ok(v) => write_out(out, v),
            Err(e) => from_core(e),
        }
    })
}

/// P(accuracy > 0.5) under Beta(alpha, beta).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_beta_prob_better_than_random(alpha: f64, beta: f64, out: *mut f64) -> HsrStatus {
    guard(|| match BetaPosterior::new(alpha, beta) {
        Ok(p) => write_out(out, beta_prob_better_than_random(&p)),
        Err(e) => from_core(e),
    })
}

/// Naive-Bayes probability that a filter applies given classifier labels.
///
/// # Safety
/// `labels` and `accuracies` must each point to `n` elements; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_nb_ensemble_prob(
    labels: *const HsrLabel,
    accuracies: *const f64,
    n: usize,
    out: *mut f64,
) -> HsrStatus {
    guard(|| {
        if labels.is_null() || accuracies.is_null() {
            return fail(HsrStatus::NullPointer, "labels or accuracies is null");
        }
        let labels: Vec<VoteLabel> = std::slice::from_raw_parts(labels, n).iter().map(|&l| l.into()).collect();
        match nb_ensemble_prob(&labels, std::slice::from_raw_parts(accuracies, n)) {
            Ok(v) => write_out(out, v),
            Err(e) => from_core(e),
        }
    })
}

/// `(crowd_votes + false_inclusions * expert_cost) / (n_items * expert_cost)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_price_ratio(
    crowd_votes: u64,
    false_inclusions: u64,
    n_items: usize,
    expert_cost: f64,
    out: *mut f64,
) -> HsrStatus {
    guard(|| {
        let loss = match LossParams::new(1.0, expert_cost) {
            Ok(l) => l,
            Err(e) => return from_core(e),
        };
        match compute_price_ratio(crowd_votes, false_inclusions, &loss, n_items, 0.0, false) {
            Ok(v) => write_out(out, v),
            Err(e) => from_core(e),
        }
    })
}

/// Parses and validates a JSON experiment configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be a valid
/// pointer. The handle is released with `hsr_experiment_free`.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_new(config_json: *const c_char, out: *mut *mut HsrExperiment) -> HsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(HsrStatus::NullPointer, "output pointer is null");
        }
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_json(text) {
            Ok(config) => write_out(out, Box::into_raw(Box::new(HsrExperiment { config, report: None }))),
            Err(e) => from_core(e),
        }
    })
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `exp` must come from `hsr_experiment_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_free(exp: *mut HsrExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

unsafe fn handle<'a>(exp: *mut HsrExperiment) -> Result<&'a mut HsrExperiment, HsrStatus> {
    exp.as_mut()
        .ok_or_else(|| fail(HsrStatus::NullPointer, "experiment handle is null"))
}

/// Overrides the base seed and discards any previous results.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_set_seed(exp: *mut HsrExperiment, seed: u64) -> HsrStatus {
    guard(|| match handle(exp) {
        Ok(h) => {
            h.config.seed = seed;
            h.report = None;
            HsrStatus::Ok
        }
        Err(s) => s,
    })
}

/// Runs the experiment with `jobs` worker threads (0 = all cores).
///
/// # Safety
/// `exp` must be a live handle, not used concurrently from another thread.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_run(exp: *mut HsrExperiment, jobs: usize) -> HsrStatus {
    guard(|| {
        let h = match handle(exp) {
            Ok(h) => h,
            Err(s) => return s,
        };
        match run_experiment(&h.config, jobs) {
            Ok(r) => {
                h.report = Some(r);
                HsrStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

fn report_of(h: &HsrExperiment) -> Result<&ExperimentReport, HsrStatus> {
    h.report
        .as_ref()
        .ok_or_else(|| fail(HsrStatus::NotFound, "experiment has not been run"))
}

/// Number of sweep points (1 without a sweep).
///
/// # Safety
/// `exp` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_point_count(exp: *mut HsrExperiment, out: *mut usize) -> HsrStatus {
    guard(|| match handle(exp) {
        Ok(h) => write_out(out, h.config.points().len()),
        Err(s) => s,
    })
}

/// Aggregated results as CSV. Free with `hsr_string_free`.
///
/// # Safety
/// `exp` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_results_csv(exp: *mut HsrExperiment, out: *mut *mut c_char) -> HsrStatus {
    guard(|| {
        let report = match handle(exp).and_then(|h| report_of(h)) {
            Ok(r) => r,
            Err(s) => return s,
        };
        match report.to_csv_string() {
            Ok(csv) => write_out(out, into_c_string(csv)),
            Err(e) => from_core(e),
        }
    })
}

/// Mean of one metric for one strategy at sweep point `point`.
///
/// # Safety
/// `exp` must be a live handle; `strategy` and `metric` NUL-terminated
/// strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsr_experiment_mean(
    exp: *mut HsrExperiment,
    strategy: *const c_char,
    metric: *const c_char,
    point: usize,
    out: *mut f64,
) -> HsrStatus {
    guard(|| {
        let h = match handle(exp) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let (strategy, metric) = match (str_arg(strategy, "strategy"), str_arg(metric, "metric")) {
            (Ok(s), Ok(m)) => (s, m),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let strategy: Strategy = match strategy.parse() {
            Ok(s) => s,
            Err(e) => return from_core(e),
        };
        let Some(&sweep_value) = h.config.points().get(point) else {
            return fail(HsrStatus::InvalidArgument, format!("no sweep point {point}"));
        };
        let report = match report_of(h) {
            Ok(r) => r,
            Err(s) => return s,
        };
        match report.mean(sweep_value, strategy, metric) {
            Some(v) => write_out(out, v),
            None => fail(HsrStatus::NotFound, format!("no {metric} for {strategy} at point {point}")),
        }
    })
}
