//! Deterministic random-stream derivation.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! (seed, purpose tag, two indices). Streams never depend on execution
//! order, so serial and thread-pooled runs draw identical values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Purpose tags keep streams for different uses disjoint even when the
/// index pair collides.
pub mod tag {
    pub const PARAM_INIT: u8 = 1;
    pub const PROMPT: u8 = 2;
    pub const ROLLOUT: u8 = 3;
    pub const SHUFFLE: u8 = 4;
    pub const TRIAL: u8 = 5;
    pub const SPLIT: u8 = 6;
    pub const REWARD_TABLE: u8 = 7;
    pub const EVAL: u8 = 8;
}

/// Derive an independent stream from (seed, tag, a, b).
///
/// Indices must fit in 28 bits each; that covers step counts, prompt
/// indices, and Monte-Carlo trial counts at desk scale.
pub fn stream(seed: u64, tag: u8, a: u64, b: u64) -> ChaCha20Rng {
    assert!(a < (1 << 28), "stream index a out of range: {a}");
    assert!(b < (1 << 28), "stream index b out of range: {b}");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 56) | (a << 28) | b);
    rng
}

/// Standard normal draw via Box-Muller. Kept local so parameter
/// initialization does not depend on a distribution crate's internals.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
