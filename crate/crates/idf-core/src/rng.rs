//! Deterministic derived RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An independent deterministic stream per `(seed, tags...)` tuple, so
/// unrelated consumers (shuffling, dropout, synthesis) never share state.
pub(crate) fn sub_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(x << 6)
            .wrapping_add(x >> 2);
        // splitmix64 finalizer
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(x)
}
