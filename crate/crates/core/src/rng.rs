//! Deterministic RNG streams keyed by (seed, purpose, ids...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes. Distinct tags keep, e.g., batch sampling and anchor
/// sampling independent so that toggling one never shifts the other.
pub mod tag {
    pub const SELECTION: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const ANCHOR: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const THEORY: u64 = 6;
}

/// One standard-normal draw.
pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from a root seed and a path of identifiers.
pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
