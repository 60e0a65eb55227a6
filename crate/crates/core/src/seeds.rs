//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] whose seed
//! is derived from the run seed plus a purpose label (and optional indices).
//! Distinct purposes give statistically independent streams, and the
//! derivation is pure, so any component can be re-run in isolation — or in
//! parallel per item — without touching a shared RNG.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer; bijective on u64 with strong avalanche.
fn finalize(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte stream, starting from `state`.
fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Derives a child seed from `seed` for the given purpose label.
pub fn derive(seed: u64, purpose: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET ^ seed, purpose.as_bytes());
    finalize(h)
}

/// Derives a child seed keyed by a purpose label plus integer indices
/// (iteration number, prompt id, ...).
pub fn derive_indexed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET ^ seed, purpose.as_bytes());
    for &ix in indices {
        h = fnv1a(h, &ix.to_le_bytes());
    }
    finalize(h)
}

/// A ChaCha8 stream for the given derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
