//! C ABI over the webnav library.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible function returns a
//! [`WebnavStatus`]; on failure a description is available from
//! [`webnav_last_error_message`] on the same thread. Strings returned
//! through out-parameters are owned by the caller and must be released
//! with [`webnav_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use webnav::agent::{Ablation, LearnedPolicy, OraclePolicy, Policy};
use webnav::dom::{serialize_dom, RefMode};
use webnav::env::{self, oracle_step, Action, EnvError, EnvState, TaskName};
use webnav::eval::{rouge_scores, run_episode};
use webnav::pipeline::{clean_actions, parse_demonstration};
use webnav::planner::{translate_utterance, PlanError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WebnavStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownTask = 3,
    EpisodeTerminated = 4,
    Io = 5,
    Parse = 6,
    Internal = 7,
}

/// A running episode.
pub struct WebnavEnv {
    state: EnvState,
}

/// A policy that can play episodes.
pub struct WebnavPolicy {
    inner: Box<dyn Policy>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(WebnavStatus, String);

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Self {
        let status = match e {
            EnvError::UnknownTask(_) => WebnavStatus::UnknownTask,
            EnvError::EpisodeTerminated => WebnavStatus::EpisodeTerminated,
            EnvError::InvalidAction(_) => WebnavStatus::InvalidArgument,
            EnvError::Dom(_) => WebnavStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        let status = match e {
            PlanError::NoRule(_) => WebnavStatus::UnknownTask,
            _ => WebnavStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WebnavStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WebnavStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WebnavStatus::Internal
        }
    }
}

fn null() -> Failure {
    Failure(WebnavStatus::NullPointer, "null pointer argument".into())
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(WebnavStatus::InvalidArgument, "string is not UTF-8".into()))
}

/// # Safety
/// `out` must be null or writable.
unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null());
    }
    let c = CString::new(s).map_err(|_| Failure(WebnavStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn ref_mode(randomized: bool) -> RefMode {
    if randomized {
        RefMode::Randomized
    } else {
        RefMode::Ordered
    }
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn webnav_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn webnav_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Starts an episode of `task` with the given seed.
///
/// # Safety
/// `task` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_env_new(
    task: *const c_char,
    seed: u64,
    randomized_refs: bool,
    out: *mut *mut WebnavEnv,
) -> WebnavStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let name: TaskName = read_str(task)?.parse()?;
        let (state, _) = env::reset(name, seed, ref_mode(randomized_refs))?;
        *out = Box::into_raw(Box::new(WebnavEnv { state }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a live handle from [`webnav_env_new`].
#[no_mangle]
pub unsafe extern "C" fn webnav_env_free(env: *mut WebnavEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_env_utterance(env: *const WebnavEnv, out: *mut *mut c_char) -> WebnavStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(null)?;
        write_string(out, env.state.utterance.clone())
    })
}

/// The current page in the flattened text form the policy reads.
///
/// # Safety
/// `env` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_env_serialized_dom(env: *const WebnavEnv, out: *mut *mut c_char) -> WebnavStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(null)?;
        write_string(out, serialize_dom(&env.state.snapshot))
    })
}

/// Applies an action written as `click ref N` or `type_text ref N text`.
///
/// # Safety
/// `env` must be a live handle, `action` a NUL-terminated string, and
/// `reward` and `terminated` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_env_step(
    env: *mut WebnavEnv,
    action: *const c_char,
    reward: *mut f64,
    terminated: *mut bool,
) -> WebnavStatus {
    guard(|| {
        let env = env.as_mut().ok_or_else(null)?;
        if reward.is_null() || terminated.is_null() {
            return Err(null());
        }
        let action: Action = read_str(action)?.parse()?;
        let result = env.state.step(&action)?;
        *reward = result.reward;
        *terminated = result.terminated;
        Ok(())
    })
}

/// The scripted solver's next action for the current state.
///
/// # Safety
/// `env` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_env_oracle_action(env: *const WebnavEnv, out: *mut *mut c_char) -> WebnavStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(null)?;
        if env.state.terminated {
            return Err(EnvError::EpisodeTerminated.into());
        }
        write_string(out, oracle_step(&env.state).action.to_string())
    })
}

/// Cleans one raw demonstration (JSON) into a processed episode (JSON).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_clean_demonstration_json(json: *const c_char, out: *mut *mut c_char) -> WebnavStatus {
    guard(|| {
        let raw = parse_demonstration(read_str(json)?).map_err(|e| Failure(WebnavStatus::Parse, e.to_string()))?;
        let episode = clean_actions(&raw);
        let text = serde_json::to_string(&episode).map_err(|e| Failure(WebnavStatus::Internal, e.to_string()))?;
        write_string(out, text)
    })
}

/// Splits an utterance into subtasks, written as `a; b;`.
///
/// # Safety
/// `task` and `utterance` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_translate_utterance(
    task: *const c_char,
    utterance: *const c_char,
    out: *mut *mut c_char,
) -> WebnavStatus {
    guard(|| {
        let plan = translate_utterance(read_str(task)?, read_str(utterance)?)?;
        write_string(out, plan.to_line())
    })
}

/// ROUGE-1 and ROUGE-L F1 over whitespace-separated tokens.
///
/// # Safety
/// `candidate` and `reference` must be NUL-terminated strings and the
/// score pointers writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    rouge1_f1: *mut f64,
    rouge_l_f1: *mut f64,
) -> WebnavStatus {
    guard(|| {
        if rouge1_f1.is_null() || rouge_l_f1.is_null() {
            return Err(null());
        }
        let c: Vec<&str> = read_str(candidate)?.split_whitespace().collect();
        let r: Vec<&str> = read_str(reference)?.split_whitespace().collect();
        let s = rouge_scores(&c, &r);
        *rouge1_f1 = s.rouge1_f1;
        *rouge_l_f1 = s.rouge_l_f1;
        Ok(())
    })
}

/// The scripted solver as a policy.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_policy_oracle(out: *mut *mut WebnavPolicy) -> WebnavStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = Box::into_raw(Box::new(WebnavPolicy {
            inner: Box::new(OraclePolicy),
        }));
        Ok(())
    })
}

/// Loads a trained checkpoint and the vocabulary file stored beside it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_policy_load(path: *const c_char, out: *mut *mut WebnavPolicy) -> WebnavStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let policy =
            LearnedPolicy::load(Path::new(read_str(path)?)).map_err(|e| Failure(WebnavStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(WebnavPolicy {
            inner: Box::new(policy),
        }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn webnav_policy_free(policy: *mut WebnavPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Plays one full episode with the rule-based plan and reports the outcome.
///
/// # Safety
/// `policy` must be a live handle, `task` a NUL-terminated string, and
/// `success` and `reward` writable.
#[no_mangle]
pub unsafe extern "C" fn webnav_policy_run_episode(
    policy: *const WebnavPolicy,
    task: *const c_char,
    seed: u64,
    randomized_refs: bool,
    success: *mut bool,
    reward: *mut f64,
) -> WebnavStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(null)?;
        if success.is_null() || reward.is_null() {
            return Err(null());
        }
        let name: TaskName = read_str(task)?.parse()?;
        let result = run_episode(policy.inner.as_ref(), name, seed, ref_mode(randomized_refs), Ablation::None)
            .map_err(|e| Failure(WebnavStatus::Internal, e.to_string()))?;
        *success = result.success;
        *reward = result.reward;
        Ok(())
    })
}
