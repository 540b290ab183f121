//! Named, seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the
//! run seed, a stream tag and an optional counter (epoch, step, restart).
//! Adding a consumer therefore never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Shuffle = 2,
    Augment = 3,
    Init = 4,
    Prototypes = 5,
    Ensemble = 6,
    Bank = 7,
    Noise = 8,
    KMeans = 9,
}

/// Deterministic generator for `(seed, stream, counter)`.
pub fn stream(seed: u64, stream: Stream, counter: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, counter));
    rng.set_stream(stream as u64);
    rng
}

/// A child seed for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, s: Stream, counter: u64) -> u64 {
    use rand::RngCore;
    stream(seed, s, counter).next_u64()
}

// splitmix64 finalizer over the pair
fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
