//! Deterministic random streams derived from a seed and a path of labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash, used to turn string ids into stream labels.
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent generator for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let key = path
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    StreamRng::seed_from_u64(key)
}
