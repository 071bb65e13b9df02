//! Seeded random streams.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`], a counter-based
//! generator whose output is defined bit-for-bit across platforms. A stream is
//! identified by `(seed, stream)`: the seed goes through `seed_from_u64` and
//! the stream id is installed with `set_stream`, so distinct stream ids give
//! independent sequences under one seed.
//!
//! Uniform `f64` draws use the rand `StandardUniform` distribution (53 random
//! mantissa bits in `[0, 1)`); Gaussian draws use `rand_distr::StandardNormal`.
//!
//! Derived seeds (per sample, per pass, per epoch) come from [`split_seed`],
//! which mixes the parent seed and an index through two rounds of the
//! SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Opens stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `seed`: `splitmix64(splitmix64(seed) ^ index)`.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}
