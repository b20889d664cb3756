//! Deterministic random streams keyed by `(seed, stream ids…)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for the given seed and stream path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for p in path {
        h = splitmix64(h ^ splitmix64(*p));
    }
    Rng::seed_from_u64(h)
}
