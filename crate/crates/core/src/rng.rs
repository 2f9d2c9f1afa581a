//! Seeded random streams. Every consumer of randomness gets its own ChaCha
//! stream derived from a base seed and a purpose/coordinate tuple, so work
//! can be reordered or parallelized without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes; kept distinct so data, truth and chains never share bits.
#[derive(Clone, Copy, Debug)]
pub enum Purpose {
    Truth = 1,
    Data = 2,
    Chain = 3,
    Bootstrap = 4,
    Misc = 5,
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(purpose, a, b)` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) ^ (a.wrapping_mul(0x9E37_79B9_7F4A_7C15) << 8) ^ b;
    rng.set_stream(id);
    rng
}
