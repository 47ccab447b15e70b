//! Seeded random-number streams.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! one global seed, a string label, and an index. Components draw from their
//! own stream, so changing how one component consumes randomness never
//! perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes state through the SplitMix64 finalizer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a ChaCha stream from `(seed, label, index)`.
///
/// The same triple always yields the same stream; distinct labels or
/// indices yield statistically independent streams.
pub fn sub_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let _ = splitmix64(&mut state);
    for byte in label.as_bytes() {
        state ^= u64::from(*byte);
        let _ = splitmix64(&mut state);
    }
    state ^= index;

    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
