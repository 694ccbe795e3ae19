//! Deterministic seed derivation for parallel-safe rng streams.
//!
//! Every stochastic unit of work (one rollout, one dataset entry, one batch
//! shuffle) gets its own rng seeded from a mix of the top-level seed and the
//! unit's coordinates. Results are then independent of worker scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; decorrelates consecutive seeds.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered list of seed components into a single sub-seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// FNV-1a over bytes; used for stable string-keyed seeds and tie-breaks.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// A deterministic rng for one unit of work.
pub fn rng_from(parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix_seed(parts))
}
