//! Seeded random streams. Every consumer derives its generator from the run
//! seed and a stream name, so changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SUBSET: &str = "subset";
pub const SELECTION: &str = "selection";
pub const SHUFFLE: &str = "shuffle";

/// FNV-1a, used only to turn stream names into seed offsets.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn stream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// A stream further keyed by an index (layer, epoch, stage...).
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let key = fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha8Rng::seed_from_u64(seed ^ key)
}
