//! End-to-end checks of the C ABI against the core library: status codes,
//! bitwise agreement with the native API, and error-message retrieval.

use std::ffi::{c_char, CStr, CString};

use alignlab_ffi::*;

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(alignlab_last_error_message())
            .to_str()
            .unwrap()
            .to_owned()
    }
}

fn make_policy(vocab: usize, seed: u64) -> *mut AlignlabPolicy {
    let mut handle: *mut AlignlabPolicy = std::ptr::null_mut();
    let status = unsafe {
        alignlab_policy_seeded_init(vocab, 16, 3, seed, seed.wrapping_add(1), 0.4, &mut handle)
    };
    assert_eq!(status, AlignlabStatus::Ok);
    assert!(!handle.is_null());
    handle
}

#[test]
fn version_is_a_nonempty_c_string() {
    let version = unsafe { CStr::from_ptr(alignlab_version()) }
        .to_str()
        .unwrap();
    assert!(!version.is_empty());
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_report_null_pointer_without_crashing() {
    let mut out = 0.0_f64;
    let status = unsafe {
        alignlab_policy_sequence_log_prob(std::ptr::null(), 0, std::ptr::null(), 0, &mut out)
    };
    assert_eq!(status, AlignlabStatus::NullPointer);
    assert!(last_error().contains("policy handle"));

    // Freeing null is an explicit no-op.
    unsafe { alignlab_policy_free(std::ptr::null_mut()) };
}

#[test]
fn invalid_construction_sets_a_readable_message() {
    let mut handle: *mut AlignlabPolicy = std::ptr::null_mut();
    let status = unsafe { alignlab_policy_seeded_init(1, 16, 3, 0, 0, 0.4, &mut handle) };
    assert_eq!(status, AlignlabStatus::InvalidInput);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn log_probs_match_the_native_api_bitwise() {
    let handle = make_policy(12, 7);
    let native = alignlab::policy::Policy::seeded_init(12, 16, 3, 7, 8, 0.4).unwrap();

    let tokens: [u32; 4] = [3, 0, 7, 11];
    let mut via_ffi = 0.0_f64;
    let status = unsafe {
        alignlab_policy_sequence_log_prob(handle, 42, tokens.as_ptr(), tokens.len(), &mut via_ffi)
    };
    assert_eq!(status, AlignlabStatus::Ok);

    let via_native = native.sequence_log_prob(42, &tokens).unwrap();
    assert_eq!(via_ffi.to_bits(), via_native.to_bits());

    unsafe { alignlab_policy_free(handle) };
}

#[test]
fn next_token_probs_fill_the_buffer_with_a_distribution() {
    let handle = make_policy(10, 3);
    assert_eq!(unsafe { alignlab_policy_vocab(handle) }, 10);
    assert_eq!(unsafe { alignlab_policy_dim(handle) }, 16);

    let context: [u32; 2] = [1, 4];
    let mut probs = [0.0_f64; 10];
    let status = unsafe {
        alignlab_policy_next_token_probs(
            handle,
            5,
            context.as_ptr(),
            context.len(),
            probs.as_mut_ptr(),
        )
    };
    assert_eq!(status, AlignlabStatus::Ok);
    let total: f64 = probs.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(probs.iter().all(|p| *p > 0.0));

    // Empty context may be passed as null + zero length.
    let status = unsafe {
        alignlab_policy_next_token_probs(handle, 5, std::ptr::null(), 0, probs.as_mut_ptr())
    };
    assert_eq!(status, AlignlabStatus::Ok);

    unsafe { alignlab_policy_free(handle) };
}

#[test]
fn generation_is_seed_stable_and_bounds_checked() {
    let handle = make_policy(8, 21);
    let mut a = [0_u32; 16];
    let mut b = [0_u32; 16];
    let (mut len_a, mut len_b) = (0_usize, 0_usize);
    let (mut lp_a, mut lp_b) = (0.0_f64, 0.0_f64);

    let status = unsafe {
        alignlab_policy_sample_response(
            handle,
            9,
            1.0,
            16,
            7,
            99,
            a.as_mut_ptr(),
            a.len(),
            &mut len_a,
            &mut lp_a,
        )
    };
    assert_eq!(status, AlignlabStatus::Ok);
    assert!((1..=16).contains(&len_a));
    assert!(lp_a.is_finite() && lp_a < 0.0);

    let status = unsafe {
        alignlab_policy_sample_response(
            handle,
            9,
            1.0,
            16,
            7,
            99,
            b.as_mut_ptr(),
            b.len(),
            &mut len_b,
            &mut lp_b,
        )
    };
    assert_eq!(status, AlignlabStatus::Ok);
    assert_eq!(len_a, len_b);
    assert_eq!(a[..len_a], b[..len_b]);
    assert_eq!(lp_a.to_bits(), lp_b.to_bits());

    // A buffer smaller than the response is rejected, not overrun.
    let mut tiny = [0_u32; 1];
    let mut len = 0_usize;
    let mut lp = 0.0_f64;
    let status = unsafe {
        alignlab_policy_greedy_response(
            handle,
            9,
            16,
            -1,
            tiny.as_mut_ptr(),
            tiny.len(),
            &mut len,
            &mut lp,
        )
    };
    if status != AlignlabStatus::Ok {
        assert_eq!(status, AlignlabStatus::InvalidInput);
        assert!(last_error().contains("token slots"));
    } else {
        // Greedy decoding happened to finish within one token.
        assert_eq!(len, 1);
    }

    unsafe { alignlab_policy_free(handle) };
}

#[test]
fn checkpoints_round_trip_bitwise_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.txt");
    let c_path = CString::new(path.to_str().unwrap()).unwrap();

    let original = make_policy(9, 13);
    assert_eq!(
        unsafe { alignlab_policy_save(original, c_path.as_ptr()) },
        AlignlabStatus::Ok
    );

    let mut restored: *mut AlignlabPolicy = std::ptr::null_mut();
    assert_eq!(
        unsafe { alignlab_policy_load(c_path.as_ptr(), &mut restored) },
        AlignlabStatus::Ok
    );

    let tokens: [u32; 3] = [2, 5, 8];
    let (mut lp_orig, mut lp_rest) = (0.0_f64, 0.0_f64);
    unsafe {
        assert_eq!(
            alignlab_policy_sequence_log_prob(original, 4, tokens.as_ptr(), 3, &mut lp_orig),
            AlignlabStatus::Ok
        );
        assert_eq!(
            alignlab_policy_sequence_log_prob(restored, 4, tokens.as_ptr(), 3, &mut lp_rest),
            AlignlabStatus::Ok
        );
    }
    assert_eq!(lp_orig.to_bits(), lp_rest.to_bits());

    let mut clone: *mut AlignlabPolicy = std::ptr::null_mut();
    assert_eq!(
        unsafe { alignlab_policy_clone(original, &mut clone) },
        AlignlabStatus::Ok
    );
    assert_eq!(unsafe { alignlab_policy_vocab(clone) }, 9);

    unsafe {
        alignlab_policy_free(original);
        alignlab_policy_free(restored);
        alignlab_policy_free(clone);
    }

    // A missing file maps to invalid input with a message.
    let missing = CString::new(dir.path().join("absent.txt").to_str().unwrap()).unwrap();
    let mut dangling: *mut AlignlabPolicy = std::ptr::null_mut();
    let status = unsafe { alignlab_policy_load(missing.as_ptr(), &mut dangling) };
    assert_eq!(status, AlignlabStatus::InvalidInput);
    assert!(dangling.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn tie_weight_matches_the_closed_form_endpoints() {
    let mut w = 0.0_f64;
    // nu = 1 collapses the weight to exactly 1 for any margin.
    for margin in [-5.0, -0.3, 0.0, 2.5] {
        assert_eq!(
            unsafe { alignlab_tie_weight(1.0, margin, &mut w) },
            AlignlabStatus::Ok
        );
        assert_eq!(w.to_bits(), 1.0_f64.to_bits());
    }

    // nu = 3: the floor 2/(nu+1) = 0.5 is approached at large |margin|,
    // and the peak at margin 0 is twice the floor.
    assert_eq!(
        unsafe { alignlab_tie_weight(3.0, 0.0, &mut w) },
        AlignlabStatus::Ok
    );
    assert!((w - 1.0).abs() < 1e-12);
    assert_eq!(
        unsafe { alignlab_tie_weight(3.0, 40.0, &mut w) },
        AlignlabStatus::Ok
    );
    assert!((w - 0.5).abs() < 1e-12);

    // Sub-unit nu is rejected.
    assert_eq!(
        unsafe { alignlab_tie_weight(0.5, 0.0, &mut w) },
        AlignlabStatus::InvalidInput
    );
}

#[test]
fn tie_probabilities_partition_unity() {
    let (mut win, mut lose, mut tie) = (0.0_f64, 0.0_f64, 0.0_f64);
    let status =
        unsafe { alignlab_tie_probabilities(3.0, 0.7, -0.4, &mut win, &mut lose, &mut tie) };
    assert_eq!(status, AlignlabStatus::Ok);
    assert!(((win + lose + tie) - 1.0).abs() < 1e-12);
    assert!(win > lose);

    let (mut win_r, mut lose_r, mut tie_r) = (0.0_f64, 0.0_f64, 0.0_f64);
    let status =
        unsafe { alignlab_tie_probabilities(3.0, -0.4, 0.7, &mut win_r, &mut lose_r, &mut tie_r) };
    assert_eq!(status, AlignlabStatus::Ok);
    assert_eq!(win.to_bits(), lose_r.to_bits());
    assert_eq!(tie.to_bits(), tie_r.to_bits());
}

#[test]
fn euler_step_matches_a_hand_computed_update() {
    // p = (0.5, 0.3, 0.2), target y = 0, step 0.1. The flow is
    // dp_k = p_k [(delta_ky - p_k) - (p_y - ||p||^2)]; here
    // p_y - ||p||^2 = 0.5 - 0.38 = 0.12, so dp = (0.19, -0.126, -0.064).
    let probs = [0.5_f64, 0.3, 0.2];
    let mut next = [0.0_f64; 3];
    let status = unsafe { alignlab_euler_step(probs.as_ptr(), 3, 0, 0.1, next.as_mut_ptr()) };
    assert_eq!(status, AlignlabStatus::Ok);
    assert!((next[0] - 0.519).abs() < 1e-15);
    assert!((next[1] - 0.2874).abs() < 1e-15);
    assert!((next[2] - 0.1936).abs() < 1e-15);
    assert!(((next[0] + next[1] + next[2]) - 1.0).abs() < 1e-12);

    // An oversized step reports the numerical status.
    let status = unsafe { alignlab_euler_step(probs.as_ptr(), 3, 0, 60.0, next.as_mut_ptr()) };
    assert_eq!(status, AlignlabStatus::NumericalViolation);
    assert!(!last_error().is_empty());
}

#[test]
fn derived_seeds_match_the_core_streams() {
    let purpose = CString::new("features").unwrap();
    let mut derived = 0_u64;
    let status = unsafe { alignlab_derive_seed(7, purpose.as_ptr(), &mut derived) };
    assert_eq!(status, AlignlabStatus::Ok);
    assert_eq!(derived, alignlab::seeds::derive(7, "features"));

    let status = unsafe { alignlab_derive_seed(7, std::ptr::null::<c_char>(), &mut derived) };
    assert_eq!(status, AlignlabStatus::NullPointer);
}

#[test]
fn generated_header_declares_the_opaque_handle() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("alignlab.h");
    let text = std::fs::read_to_string(header).unwrap();
    assert!(text.contains("AlignlabPolicy"));
    assert!(text.contains("ALIGNLAB_STATUS_OK"));
    assert!(text.contains("alignlab_policy_sequence_log_prob"));
}
