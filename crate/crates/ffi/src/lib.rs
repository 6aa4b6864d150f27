//! C ABI over the knowtag primitives.
//!
//! Every fallible function returns a [`KtStatus`]; on failure a message is
//! available from [`kt_last_error_message`] on the same thread. Strings
//! returned through out-pointers are owned by the caller and released with
//! [`kt_string_free`]. Policies are opaque handles released with
//! [`kt_policy_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use knowtag::data::{JudgmentLabel, KnowledgeConcept, Question};
use knowtag::embedding::cosine_f32;
use knowtag::episode::{compute_returns, eval_reward, RewardMode};
use knowtag::eval::ConfusionCounts;
use knowtag::policy::{greedy_plan, load_params, Action, PolicyParameters};
use knowtag::prompt::{build_zero_shot_prompt, parse_judgment, Verdict};
use knowtag::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    NonFinite = 6,
    Backend = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

pub const KT_VERDICT_NO: i32 = 0;
pub const KT_VERDICT_YES: i32 = 1;
pub const KT_VERDICT_UNPARSEABLE: i32 = -1;

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KtMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// A loaded retriever policy.
pub struct KtPolicy {
    params: PolicyParameters,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: KtStatus, msg: impl Into<String>) -> KtStatus {
    set_error(msg);
    status
}

fn from_error(err: Error) -> KtStatus {
    let status = match &err {
        Error::Io { .. } => KtStatus::Io,
        Error::Parse { .. } | Error::DuplicateKey { .. } | Error::Format(_) => KtStatus::Format,
        Error::Domain(_) | Error::Contract(_) => KtStatus::InvalidArgument,
        Error::Config(_) => KtStatus::Config,
        Error::NonFinite(_) => KtStatus::NonFinite,
        Error::BackendUnavailable { .. } => KtStatus::Backend,
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> KtStatus) -> KtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(KtStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, KtStatus> {
    if p.is_null() {
        return Err(fail(KtStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KtStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], KtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(KtStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! out_ptr {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(KtStatus::NullPointer, concat!("`", $name, "` is null"));
        }
    };
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next knowtag call on the same thread.
#[no_mangle]
pub extern "C" fn kt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes one of `KT_VERDICT_*` for a judge response.
///
/// # Safety
/// `text` must be a NUL-terminated string; `verdict_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_parse_judgment(text: *const c_char, verdict_out: *mut i32) -> KtStatus {
    guard(|| {
        let text = try_ffi!(str_arg(text, "text"));
        out_ptr!(verdict_out, "verdict_out");
        *verdict_out = match parse_judgment(text).verdict {
            Verdict::Yes => KT_VERDICT_YES,
            Verdict::No => KT_VERDICT_NO,
            Verdict::Unparseable => KT_VERDICT_UNPARSEABLE,
        };
        KtStatus::Ok
    })
}

/// Renders the zero-shot judge prompt into a new string.
///
/// # Safety
/// All strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_render_zero_shot_prompt(
    knowledge_id: *const c_char,
    knowledge_text: *const c_char,
    question_id: *const c_char,
    question_text: *const c_char,
    out: *mut *mut c_char,
) -> KtStatus {
    guard(|| {
        let k = KnowledgeConcept {
            id: try_ffi!(str_arg(knowledge_id, "knowledge_id")).to_string(),
            definition_text: try_ffi!(str_arg(knowledge_text, "knowledge_text")).to_string(),
        };
        let q = Question {
            id: try_ffi!(str_arg(question_id, "question_id")).to_string(),
            stem_text: try_ffi!(str_arg(question_text, "question_text")).to_string(),
        };
        out_ptr!(out, "out");
        let text = build_zero_shot_prompt(&k, &q).render();
        match CString::new(text) {
            Ok(c) => {
                *out = c.into_raw();
                KtStatus::Ok
            }
            Err(_) => fail(KtStatus::InvalidArgument, "prompt contains a NUL byte"),
        }
    })
}

/// # Safety
/// `a` and `b` must each point to `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_cosine_similarity(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> KtStatus {
    guard(|| {
        let a = try_ffi!(slice_arg(a, dim, "a"));
        let b = try_ffi!(slice_arg(b, dim, "b"));
        out_ptr!(out, "out");
        match cosine_f32(a, b) {
            Ok(v) => {
                *out = v;
                KtStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Loads a retriever parameter file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_policy_load(path: *const c_char, out: *mut *mut KtPolicy) -> KtStatus {
    guard(|| {
        let path = try_ffi!(str_arg(path, "path"));
        out_ptr!(out, "out");
        match load_params(Path::new(path)) {
            Ok((params, _)) => {
                *out = Box::into_raw(Box::new(KtPolicy { params }));
                KtStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `policy` must be null or a handle from [`kt_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kt_policy_free(policy: *mut KtPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `policy` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_policy_dims(
    policy: *const KtPolicy,
    embedding_dim: *mut usize,
    hidden: *mut usize,
    layers: *mut usize,
) -> KtStatus {
    guard(|| {
        if policy.is_null() {
            return fail(KtStatus::NullPointer, "`policy` is null");
        }
        out_ptr!(embedding_dim, "embedding_dim");
        out_ptr!(hidden, "hidden");
        out_ptr!(layers, "layers");
        let s = (*policy).params.shape;
        *embedding_dim = s.embedding_dim;
        *hidden = s.hidden;
        *layers = s.layers;
        KtStatus::Ok
    })
}

/// Greedy retrieval for one query. `bank` holds `bank_len` row-major
/// vectors of the policy's embedding dim. Selected bank indices are written
/// to `out_indices` in order; `out_stopped` reports whether the policy chose
/// Stop before reaching `max_steps`. Pass `excluded = -1` to offer every entry.
///
/// # Safety
/// `x_k`, `x_q` must hold the embedding dim; `bank` `bank_len * dim`
/// doubles; `out_indices` room for `out_capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn kt_policy_greedy_select(
    policy: *const KtPolicy,
    x_k: *const f64,
    x_q: *const f64,
    bank: *const f64,
    bank_len: usize,
    max_steps: usize,
    stop_enabled: bool,
    excluded: i64,
    out_indices: *mut usize,
    out_capacity: usize,
    out_len: *mut usize,
    out_stopped: *mut bool,
) -> KtStatus {
    guard(|| {
        if policy.is_null() {
            return fail(KtStatus::NullPointer, "`policy` is null");
        }
        let params = &(*policy).params;
        let d = params.shape.embedding_dim;
        let x_k = try_ffi!(slice_arg(x_k, d, "x_k"));
        let x_q = try_ffi!(slice_arg(x_q, d, "x_q"));
        let flat = try_ffi!(slice_arg(bank, bank_len * d, "bank"));
        out_ptr!(out_len, "out_len");
        out_ptr!(out_stopped, "out_stopped");
        let rows: Vec<Vec<f64>> = flat.chunks(d.max(1)).map(|c| c.to_vec()).collect();
        let excluded = match excluded {
            e if e < 0 => None,
            e => Some(e as usize),
        };
        let actions = match greedy_plan(params, x_k, x_q, &rows, max_steps, stop_enabled, excluded) {
            Ok(a) => a,
            Err(e) => return from_error(e),
        };
        let picks: Vec<usize> = actions
            .iter()
            .filter_map(|a| match a {
                Action::Demo(i) => Some(*i),
                Action::Stop => None,
            })
            .collect();
        *out_len = picks.len();
        *out_stopped = actions.last() == Some(&Action::Stop);
        if picks.len() > out_capacity {
            return fail(
                KtStatus::BufferTooSmall,
                format!("{} indices selected, capacity {out_capacity}", picks.len()),
            );
        }
        if !picks.is_empty() {
            out_ptr!(out_indices, "out_indices");
            ptr::copy_nonoverlapping(picks.as_ptr(), out_indices, picks.len());
        }
        KtStatus::Ok
    })
}

/// +1 when `verdict` matches `gold` (0 or 1), otherwise -1; unparseable is -1.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_eval_reward(verdict: i32, gold: i32, out: *mut i32) -> KtStatus {
    guard(|| {
        out_ptr!(out, "out");
        let v = match verdict {
            KT_VERDICT_YES => Verdict::Yes,
            KT_VERDICT_NO => Verdict::No,
            KT_VERDICT_UNPARSEABLE => Verdict::Unparseable,
            other => return fail(KtStatus::InvalidArgument, format!("unknown verdict {other}")),
        };
        let g = match JudgmentLabel::from_int(gold as i64) {
            Ok(g) => g,
            Err(e) => return from_error(e),
        };
        *out = eval_reward(v, g);
        KtStatus::Ok
    })
}

/// Returns with stop bonus for one episode. `final_only` zeroes every
/// correctness reward except the last.
///
/// # Safety
/// `rewards`, `bonuses` must hold `n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn kt_discounted_returns(
    rewards: *const i32,
    bonuses: *const i32,
    n: usize,
    final_only: bool,
    gamma: f64,
    omega: f64,
    out: *mut f64,
) -> KtStatus {
    guard(|| {
        let r = try_ffi!(slice_arg(rewards, n, "rewards"));
        let b = try_ffi!(slice_arg(bonuses, n, "bonuses"));
        if !(0.0..=1.0).contains(&gamma) || !omega.is_finite() {
            return fail(KtStatus::InvalidArgument, "gamma must be in [0, 1] and omega finite");
        }
        let mode = if final_only { RewardMode::FinalOnly } else { RewardMode::PerStep };
        let returns = compute_returns(r, b, mode, gamma, omega);
        if n > 0 {
            out_ptr!(out, "out");
            ptr::copy_nonoverlapping(returns.as_ptr(), out, n);
        }
        KtStatus::Ok
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_metrics_from_counts(tp: u64, fp: u64, tn: u64, fn_: u64, out: *mut KtMetrics) -> KtStatus {
    guard(|| {
        out_ptr!(out, "out");
        let m = ConfusionCounts::new(tp, fp, tn, fn_).metrics();
        *out = KtMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            precision_undefined: m.precision_undefined,
            recall_undefined: m.recall_undefined,
        };
        KtStatus::Ok
    })
}
