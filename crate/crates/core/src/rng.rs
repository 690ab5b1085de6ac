//! Seeded random streams.
//!
//! Every run derives its randomness from one `u64` seed. Stream 0 drives the
//! coordinator (tree selection, expansion coins); stream `1 + w` belongs to
//! simulation worker `w`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn coordinator(seed: u64) -> Rng {
    stream(seed, 0)
}

pub fn worker(seed: u64, worker: usize) -> Rng {
    stream(seed, 1 + worker as u64)
}

/// SplitMix64 step, used to derive per-repetition seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
