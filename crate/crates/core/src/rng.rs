//! Named random streams derived from a single root seed.
//!
//! Every stochastic component (split, init, dropout, sampler, synthetic data)
//! draws from its own stream so that changing how much randomness one
//! component consumes never shifts the values another component sees.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const SAMPLER: &str = "sampler";
pub const SYNTH: &str = "synth";

/// FNV-1a, used to turn stream names and species names into stable 64-bit keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
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

/// Derives the seed of stream `name` under `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix(splitmix(root) ^ fnv1a64(name.as_bytes()))
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(stream_seed(root, name))
}

/// A sub-stream, e.g. one per epoch of the sampler.
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix(stream_seed(root, name) ^ splitmix(index)))
}
