//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed plus a path of stream identifiers, so results do not
//! depend on scheduling or on how many streams were drawn before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `parts` into `root` with SplitMix64 finalization.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix(root ^ 0x5151_7e3a_9d2c_44b1);
    for &p in parts {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

pub fn stream(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, parts))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
