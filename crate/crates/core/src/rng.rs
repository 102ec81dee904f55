//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every parallel unit of work (client, round, sample chunk, sweep cell)
//! derives its own stream from the experiment seed plus structural tags.
//! Results are therefore identical no matter how work is distributed over
//! threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of structural tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x6a09_e667_f3bc_c908);
    for &tag in tags {
        state = mix(state ^ mix(tag));
    }
    state
}

/// A deterministic RNG for the given base seed and tags.
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
