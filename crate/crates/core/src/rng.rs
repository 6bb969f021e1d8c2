//! Seeded random streams.
//!
//! Nothing in this crate touches a global generator. Every stochastic
//! operation takes a `&mut ChaCha8Rng`, and independent consumers derive
//! their own stream from `(seed, purpose, index)` so that, for example, the
//! noise draws of a training step do not depend on how many bootstrap coins
//! were flipped before it.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dataset = 2,
    Batch = 3,
    Noise = 4,
    Bootstrap = 5,
    Sampling = 6,
    Probe = 7,
    Reference = 8,
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}
