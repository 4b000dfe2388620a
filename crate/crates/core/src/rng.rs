//! Seeding helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng`, whose output is
//! specified independently of platform and word size. Derived streams are
//! obtained by mixing a base seed with a stable 64-bit hash of a name (bag
//! id, purpose tag) and a counter (epoch, fold).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// `mix(seed, key, counter)`: the derived sub-seed for one (name, counter) stream.
pub fn mix(seed: u64, key: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ key) ^ counter)
}

/// Sub-seed for dividing `bag_id` at `epoch`.
pub fn bag_epoch_seed(seed: u64, bag_id: &str, epoch: u64) -> u64 {
    mix(seed, stable_hash(bag_id), epoch)
}

/// Sub-seed for a named purpose (model init, shuffling, ...) at a counter.
pub fn tagged_seed(seed: u64, tag: &str, counter: u64) -> u64 {
    mix(seed, stable_hash(tag), counter)
}
