//! Seed plumbing. Every random stream is a ChaCha8 generator derived from a root
//! seed and a name, so components stay reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named child seed of `root`, e.g. `sub_seed(seed, "negatives")`.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    splitmix(root ^ fnv1a(name.as_bytes()))
}

/// Child seed indexed by integers (epoch/batch, user/annotator, ...).
pub fn mix(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn named(root: u64, name: &str) -> Rng {
    rng(sub_seed(root, name))
}
