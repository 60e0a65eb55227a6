//! C ABI over the alignlab core: opaque policy handles, status codes, and
//! a thread-local last-error message.
//!
//! Conventions:
//!
//! * Every fallible call returns an [`AlignlabStatus`]; `ALIGNLAB_STATUS_OK`
//!   (0) means the out-parameters were written. The non-zero codes mirror
//!   the CLI exit classes: 2 invalid input, 3 degenerate data, 4 numerical
//!   violation.
//! * On failure, [`alignlab_last_error_message`] returns a human-readable
//!   description. The pointer stays valid on the calling thread until the
//!   next failing call from that thread.
//! * Policies are opaque heap handles created by the constructors and
//!   released with [`alignlab_policy_free`]. Handles are not thread-safe;
//!   share them only behind an external lock.
//! * Buffers are always caller-allocated; functions state the capacity they
//!   require and never allocate memory they hand to the caller (other than
//!   handles).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use alignlab::policy::Policy;
use alignlab::preference::RaoKupper;

/// Result class of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignlabStatus {
    /// Success; out-parameters are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid argument, unreadable file, or malformed data.
    InvalidInput = 2,
    /// Input was structurally valid but degenerate (for example a
    /// single-class training corpus).
    DegenerateData = 3,
    /// A numerical violation: non-finite values or an oversized step.
    NumericalViolation = 4,
    /// An internal invariant failed; the library state is still consistent.
    Internal = 5,
}

/// Opaque handle to a softmax policy.
pub struct AlignlabPolicy(Policy);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(error: &alignlab::Error) -> AlignlabStatus {
    if error.is_degenerate_data() {
        AlignlabStatus::DegenerateData
    } else if error.is_numerical() {
        AlignlabStatus::NumericalViolation
    } else {
        AlignlabStatus::InvalidInput
    }
}

fn fail(error: &alignlab::Error) -> AlignlabStatus {
    set_error(&error.to_string());
    status_of(error)
}

fn fail_null(what: &str) -> AlignlabStatus {
    set_error(&format!("{what} must not be null"));
    AlignlabStatus::NullPointer
}

/// Runs `body` with panics converted to `Internal` instead of unwinding
/// across the C boundary.
fn guarded(body: impl FnOnce() -> AlignlabStatus) -> AlignlabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AlignlabStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid C string.
unsafe fn utf8_path<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, AlignlabStatus> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(AlignlabStatus::InvalidInput)
        }
    }
}

/// # Safety
/// `ptr` must point to `len` readable elements, or be null with `len` 0.
unsafe fn slice_arg<'a, T>(
    ptr: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], AlignlabStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn policy_arg<'a>(handle: *const AlignlabPolicy) -> Result<&'a Policy, AlignlabStatus> {
    if handle.is_null() {
        return Err(fail_null("policy handle"));
    }
    Ok(unsafe { &(*handle).0 })
}

fn emit_policy(out: *mut *mut AlignlabPolicy, policy: Policy) -> AlignlabStatus {
    if out.is_null() {
        return fail_null("out handle");
    }
    unsafe { *out = Box::into_raw(Box::new(AlignlabPolicy(policy))) };
    AlignlabStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn alignlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread (empty string if none).
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn alignlab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Creates a seeded random-init policy. `vocab >= 2`, `dim >= 1`,
/// `init_scale` finite and `> 0`.
///
/// # Safety
/// `out` must be a valid pointer to a policy-handle slot.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_seeded_init(
    vocab: usize,
    dim: usize,
    window: usize,
    feature_seed: u64,
    init_seed: u64,
    init_scale: f64,
    out: *mut *mut AlignlabPolicy,
) -> AlignlabStatus {
    guarded(
        || match Policy::seeded_init(vocab, dim, window, feature_seed, init_seed, init_scale) {
            Ok(policy) => emit_policy(out, policy),
            Err(e) => fail(&e),
        },
    )
}

/// Loads a policy from a text checkpoint written by [`alignlab_policy_save`].
///
/// # Safety
/// `path` must be a valid C string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_load(
    path: *const c_char,
    out: *mut *mut AlignlabPolicy,
) -> AlignlabStatus {
    guarded(|| {
        let path = match unsafe { utf8_path(path, "checkpoint path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match Policy::load(path) {
            Ok(policy) => emit_policy(out, policy),
            Err(e) => fail(&e),
        }
    })
}

/// Writes the policy to a text checkpoint that round-trips bitwise.
///
/// # Safety
/// `policy` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_save(
    policy: *const AlignlabPolicy,
    path: *const c_char,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let path = match unsafe { utf8_path(path, "checkpoint path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match policy.save(path) {
            Ok(()) => AlignlabStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Deep-copies a policy into a fresh handle.
///
/// # Safety
/// `policy` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_clone(
    policy: *const AlignlabPolicy,
    out: *mut *mut AlignlabPolicy,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        emit_policy(out, policy.clone())
    })
}

/// Releases a handle. Null is a no-op. The handle must not be used after.
///
/// # Safety
/// `policy` must be null or a handle returned by this library, freed at
/// most once.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_free(policy: *mut AlignlabPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Vocabulary size of the policy (0 if the handle is null).
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_vocab(policy: *const AlignlabPolicy) -> usize {
    if policy.is_null() {
        0
    } else {
        unsafe { (*policy).0.vocab() }
    }
}

/// Feature dimension of the policy (0 if the handle is null).
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_dim(policy: *const AlignlabPolicy) -> usize {
    if policy.is_null() {
        0
    } else {
        unsafe { (*policy).0.dim() }
    }
}

/// Exact log-probability of `tokens` (length `len >= 1`) under the policy
/// for the given prompt, written to `out`.
///
/// # Safety
/// `tokens` must point to `len` readable token ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_sequence_log_prob(
    policy: *const AlignlabPolicy,
    prompt: u64,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let tokens = match unsafe { slice_arg(tokens, len, "tokens") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail_null("out value");
        }
        match policy.sequence_log_prob(prompt, tokens) {
            Ok(lp) => {
                unsafe { *out = lp };
                AlignlabStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Next-token distribution after `context` (length `context_len`, possibly
/// 0). Writes exactly `alignlab_policy_vocab(policy)` probabilities into
/// `out_probs`, which must have at least that capacity.
///
/// # Safety
/// `context` must point to `context_len` readable token ids (or be null
/// with length 0); `out_probs` must have vocabulary-size capacity.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_next_token_probs(
    policy: *const AlignlabPolicy,
    prompt: u64,
    context: *const u32,
    context_len: usize,
    out_probs: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let context = match unsafe { slice_arg(context, context_len, "context") } {
            Ok(c) => c,
            Err(status) => return status,
        };
        if out_probs.is_null() {
            return fail_null("out buffer");
        }
        match policy.next_token_distribution(prompt, context) {
            Ok(dist) => {
                let probs = dist.probs();
                unsafe {
                    std::ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, probs.len());
                }
                AlignlabStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Shared tail of the two generation calls: bounds-checks the caller
/// buffer, copies tokens, reports length and exact log-probability.
unsafe fn emit_response(
    response: alignlab::policy::Response,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_log_prob: *mut f64,
) -> AlignlabStatus {
    if out_tokens.is_null() || out_len.is_null() || out_log_prob.is_null() {
        return fail_null("out buffer");
    }
    if response.tokens.len() > capacity {
        set_error(&format!(
            "response needs {} token slots but the buffer holds {capacity}",
            response.tokens.len()
        ));
        return AlignlabStatus::InvalidInput;
    }
    unsafe {
        std::ptr::copy_nonoverlapping(response.tokens.as_ptr(), out_tokens, response.tokens.len());
        *out_len = response.tokens.len();
        *out_log_prob = response.log_prob;
    }
    AlignlabStatus::Ok
}

/// Greedy decoding for up to `max_len` tokens; generation stops after
/// emitting the end token when `eos >= 0`. `capacity` is the size of
/// `out_tokens`; it must be at least `max_len`.
///
/// # Safety
/// Out-pointers must be writable; `out_tokens` must hold `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_greedy_response(
    policy: *const AlignlabPolicy,
    prompt: u64,
    max_len: usize,
    eos: i64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_log_prob: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let eos = if eos < 0 { None } else { Some(eos as u32) };
        match policy.greedy_response(prompt, max_len, eos) {
            Ok(r) => unsafe { emit_response(r, out_tokens, capacity, out_len, out_log_prob) },
            Err(e) => fail(&e),
        }
    })
}

/// Temperature sampling with an explicit RNG seed: identical seeds give
/// identical responses. Other arguments as in
/// [`alignlab_policy_greedy_response`].
///
/// # Safety
/// Out-pointers must be writable; `out_tokens` must hold `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn alignlab_policy_sample_response(
    policy: *const AlignlabPolicy,
    prompt: u64,
    temperature: f64,
    max_len: usize,
    eos: i64,
    rng_seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_log_prob: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        let policy = match unsafe { policy_arg(policy) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let eos = if eos < 0 { None } else { Some(eos as u32) };
        match policy.sample_response(prompt, temperature, max_len, eos, rng_seed) {
            Ok(r) => unsafe { emit_response(r, out_tokens, capacity, out_len, out_log_prob) },
            Err(e) => fail(&e),
        }
    })
}

/// Tie-aware sample weight w(margin) for tie parameter `nu >= 1`; equals
/// 1.0 exactly at `nu = 1`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alignlab_tie_weight(
    nu: f64,
    margin: f64,
    out: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out value");
        }
        let weight = RaoKupper::new(nu).and_then(|rk| rk.sample_weight(margin));
        match weight {
            Ok(w) => {
                unsafe { *out = w };
                AlignlabStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Win/lose/tie probabilities for rewards `(r_i, r_j)` under tie parameter
/// `nu >= 1`. The three outputs always sum to 1.
///
/// # Safety
/// All three out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn alignlab_tie_probabilities(
    nu: f64,
    r_i: f64,
    r_j: f64,
    out_win: *mut f64,
    out_lose: *mut f64,
    out_tie: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        if out_win.is_null() || out_lose.is_null() || out_tie.is_null() {
            return fail_null("out value");
        }
        let probs = RaoKupper::new(nu).and_then(|rk| rk.probabilities(r_i, r_j));
        match probs {
            Ok(p) => {
                unsafe {
                    *out_win = p.win;
                    *out_lose = p.lose;
                    *out_tie = p.tie;
                }
                AlignlabStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// One explicit-Euler step of the cross-entropy training flow on a
/// probability vector of length `len` toward `target`. Writes the updated
/// distribution into `out` (capacity `len`). Fails with the numerical
/// status when the step pushes any coordinate out of (0, 1).
///
/// # Safety
/// `probs` must point to `len` readable values; `out` must hold `len`
/// writable slots.
#[no_mangle]
pub unsafe extern "C" fn alignlab_euler_step(
    probs: *const f64,
    len: usize,
    target: usize,
    step: f64,
    out: *mut f64,
) -> AlignlabStatus {
    guarded(|| {
        let probs = match unsafe { slice_arg(probs, len, "probability vector") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail_null("out buffer");
        }
        match alignlab::dynamics::euler_step(probs, target, step) {
            Ok(next) => {
                unsafe { std::ptr::copy_nonoverlapping(next.as_ptr(), out, next.len()) };
                AlignlabStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Derives a purpose-scoped seed from a root seed, matching the library's
/// own stream derivation (same purpose string, same result).
///
/// # Safety
/// `purpose` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alignlab_derive_seed(
    seed: u64,
    purpose: *const c_char,
    out: *mut u64,
) -> AlignlabStatus {
    guarded(|| {
        if purpose.is_null() {
            return fail_null("purpose string");
        }
        if out.is_null() {
            return fail_null("out value");
        }
        match unsafe { CStr::from_ptr(purpose) }.to_str() {
            Ok(p) => {
                unsafe { *out = alignlab::seeds::derive(seed, p) };
                AlignlabStatus::Ok
            }
            Err(_) => {
                set_error("purpose string is not valid UTF-8");
                AlignlabStatus::InvalidInput
            }
        }
    })
}
